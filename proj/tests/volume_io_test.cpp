#include "segcal/volume_io.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "temp_dir.hpp"

namespace segcal {
namespace {

using testing::TempDir;

// Probabilities already rounded to float32 so the round trip can be exact.
ProbabilityVolume float_probabilities(std::mt19937_64& rng, std::size_t classes,
                                      std::vector<std::size_t> dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  const ProbabilityVolume p = oracle::random_probabilities(rng, classes, n);
  ChannelVolume f(classes, dims);
  for (std::size_t k = 0; k < f.values().size(); ++k) {
    f.values()[k] = static_cast<float>(p.field().values()[k]);
  }
  return ProbabilityVolume(std::move(f));
}

void truncate_file(const std::filesystem::path& path, std::uintmax_t drop) {
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - drop);
}

bool message_contains(const std::function<void()>& fn, const std::string& needle) {
  try {
    fn();
  } catch (const IoError& e) {
    return std::string(e.what()).find(needle) != std::string::npos;
  }
  return false;
}

TEST(Tensor, HeaderLayoutIsLittleEndian) {
  const TempDir dir;
  RawTensor t;
  t.header = {DType::kUInt8, {2, 3}};
  t.payload = {1, 2, 3, 4, 5, 6};
  write_tensor(dir / "t.calv", t);
  const std::string bytes = testing::read_file(dir / "t.calv");
  ASSERT_EQ(bytes.size(), 5u + 1u + 8u + 16u + 6u);
  EXPECT_EQ(bytes.substr(0, 5), "CALV1");
  EXPECT_EQ(bytes[5], 2);
  EXPECT_EQ(bytes[6], 2);  // rank, low byte first
  for (int k = 7; k < 14; ++k) EXPECT_EQ(bytes[k], 0);
  EXPECT_EQ(bytes[14], 2);
  EXPECT_EQ(bytes[22], 3);
  EXPECT_EQ(bytes.back(), 6);

  const RawTensor back = read_tensor(dir / "t.calv");
  EXPECT_EQ(back.header.dims, t.header.dims);
  EXPECT_EQ(back.payload, t.payload);
}

TEST(Tensor, RoundTripsEveryDtype) {
  const TempDir dir;
  std::mt19937_64 rng(1);
  for (DType dtype : {DType::kFloat32, DType::kUInt8, DType::kUInt16}) {
    RawTensor t;
    t.header = {dtype, {3, 4, 5}};
    t.payload.resize(60 * dtype_size(dtype));
    for (auto& b : t.payload) b = static_cast<std::uint8_t>(rng());
    if (dtype == DType::kFloat32) {
      for (std::size_t k = 0; k < 60; ++k) {
        const float v = static_cast<float>(k) * 0.37f;
        std::memcpy(t.payload.data() + 4 * k, &v, 4);
      }
    }
    write_tensor(dir / "t.calv", t);
    const RawTensor back = read_tensor(dir / "t.calv");
    EXPECT_EQ(back.header.dtype, dtype);
    EXPECT_EQ(back.header.dims, t.header.dims);
    EXPECT_EQ(back.payload, t.payload);
  }
}

TEST(Tensor, BadMagicAndDtypeRejected) {
  const TempDir dir;
  {
    std::ofstream out(dir / "bad.calv", std::ios::binary);
    out << "NOPE1xxxxxxxxxxxxxxxxxxxx";
  }
  EXPECT_TRUE(message_contains([&] { read_tensor(dir / "bad.calv"); }, "bad magic"));
  {
    std::ofstream out(dir / "dtype.calv", std::ios::binary);
    out << "CALV1" << '\x09' << std::string(8, '\0');
  }
  EXPECT_TRUE(message_contains([&] { read_tensor(dir / "dtype.calv"); }, "dtype"));
  EXPECT_THROW(read_tensor(dir / "missing.calv"), IoError);
}

TEST(Tensor, TruncatedPayloadNamesByteCounts) {
  const TempDir dir;
  std::mt19937_64 rng(2);
  save_probabilities(dir / "p.calv", float_probabilities(rng, 3, {4, 4}));
  truncate_file(dir / "p.calv", 10);
  try {
    load_probabilities(dir / "p.calv");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("truncated"), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(3 * 16 * 4)), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(3 * 16 * 4 - 10)), std::string::npos) << msg;
    EXPECT_NE(msg.find("p.calv"), std::string::npos) << msg;
  }
}

TEST(Probabilities, RoundTripBitwise) {
  const TempDir dir;
  std::mt19937_64 rng(3);
  const ProbabilityVolume p = float_probabilities(rng, 4, {3, 5, 2});
  save_probabilities(dir / "p.calv", p);
  const ProbabilityVolume back = load_probabilities(dir / "p.calv");
  EXPECT_EQ(back.spatial_dims(), p.spatial_dims());
  EXPECT_EQ(back, p);
}

TEST(Probabilities, InvalidValuesRejected) {
  const TempDir dir;
  ChannelVolume bad(2, {2}, {0.5, 0.5, 0.5, 0.7});
  save_logits(dir / "unnormalized.calv", bad);
  EXPECT_THROW(load_probabilities(dir / "unnormalized.calv"), IoError);
  ChannelVolume nan(2, {1}, {std::nan(""), 1.0});
  save_logits(dir / "nan.calv", nan);
  EXPECT_TRUE(message_contains([&] { load_probabilities(dir / "nan.calv"); }, "non-finite"));
  EXPECT_THROW(load_logits(dir / "nan.calv"), IoError);

  // Multi-label volumes need not sum to one.
  ChannelVolume multi(2, {1}, {0.5, 0.75});
  save_logits(dir / "multi.calv", multi);
  EXPECT_NO_THROW(load_probabilities(dir / "multi.calv", ProbabilityKind::kMultiLabel));
}

TEST(Labels, RoundTripAndValidation) {
  const TempDir dir;
  std::mt19937_64 rng(4);
  const LabelVolume labels = oracle::random_labels(rng, 5, 40);
  save_labels(dir / "l.calv", labels);
  EXPECT_EQ(read_tensor_header(dir / "l.calv").dtype, DType::kUInt8);
  EXPECT_EQ(load_labels(dir / "l.calv", 5), labels);
  EXPECT_THROW(load_labels(dir / "l.calv", 3), IoError);

  std::vector<std::uint16_t> wide(10);
  for (std::size_t i = 0; i < wide.size(); ++i) wide[i] = static_cast<std::uint16_t>(290 + i);
  const LabelVolume many = LabelVolume::from_indices(300, {10}, wide);
  save_labels(dir / "w.calv", many);
  EXPECT_EQ(read_tensor_header(dir / "w.calv").dtype, DType::kUInt16);
  EXPECT_EQ(load_labels(dir / "w.calv", 300), many);

  save_probabilities(dir / "p.calv", float_probabilities(rng, 2, {3}));
  EXPECT_THROW(load_labels(dir / "p.calv", 2), IoError);
}

TEST(Logits, RoundTrip) {
  const TempDir dir;
  ChannelVolume z(3, {2, 2});
  for (std::size_t k = 0; k < z.values().size(); ++k) z.values()[k] = static_cast<float>(k) - 5.5f;
  save_logits(dir / "z.calv", z);
  EXPECT_EQ(load_logits(dir / "z.calv"), z);
}

struct ManifestFixture {
  TempDir dir;
  std::mt19937_64 rng{5};

  ManifestCase add_case(const std::string& id, std::size_t classes = 4) {
    const ProbabilityVolume p = float_probabilities(rng, classes, {6});
    save_probabilities(dir / (id + "_p.calv"), p);
    save_labels(dir / (id + "_l.calv"), oracle::random_labels(rng, classes, 6));
    save_logits(dir / (id + "_z.calv"), p.field());
    return ManifestCase{id, id + "_p.calv", id + "_l.calv", id + "_z.calv", std::nullopt};
  }

  void write_json(const std::string& text) {
    std::ofstream(dir / "m.json") << text;
  }
};

TEST(Manifest, MinimalOneCase) {
  ManifestFixture fx;
  fx.add_case("only", 2);
  fx.write_json(R"({"classes": ["bg", "fg"], "cases": [{"id": "only", "prediction": "only_p.calv", "label": "only_l.calv"}]})");
  const DatasetManifest m = load_manifest(fx.dir / "m.json");
  EXPECT_EQ(m.num_classes(), 2u);
  ASSERT_EQ(m.cases.size(), 1u);
  EXPECT_EQ(m.cases[0].prediction, fx.dir / "only_p.calv");
  EXPECT_FALSE(m.cases[0].logits.has_value());
  EXPECT_EQ(m.split, "test");
}

TEST(Manifest, RoundTripWithHecAndStableOrder) {
  ManifestFixture fx;
  DatasetManifest m;
  m.classes = {"bg", "a", "b", "c"};
  m.hec = {HecClass{"whole", {1, 2, 3}}};
  m.split = "val";
  for (const char* id : {"zeta", "alpha", "mid", "beta"}) m.cases.push_back(fx.add_case(id));
  save_manifest(fx.dir / "m.json", m);

  const DatasetManifest a = load_manifest(fx.dir / "m.json");
  const DatasetManifest b = load_manifest(fx.dir / "m.json");
  ASSERT_EQ(a.cases.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(a.cases[k].id, m.cases[k].id);
    EXPECT_EQ(a.cases[k].id, b.cases[k].id);
    EXPECT_EQ(a.cases[k].prediction, fx.dir / m.cases[k].prediction);
  }
  ASSERT_EQ(a.hec.size(), 1u);
  EXPECT_EQ(a.hec[0].name, "whole");
  EXPECT_EQ(a.hec[0].members, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(a.split, "val");

  const std::string first = testing::read_file(fx.dir / "m.json");
  save_manifest(fx.dir / "m.json", a);
  EXPECT_EQ(testing::read_file(fx.dir / "m.json"), first);
}

TEST(Manifest, ErrorsNameTheCase) {
  ManifestFixture fx;
  fx.add_case("good", 2);
  fx.write_json(R"({"classes": ["bg", "fg"], "cases": [
      {"id": "good", "prediction": "good_p.calv", "label": "good_l.calv"},
      {"id": "case_17", "prediction": "nowhere.calv", "label": "good_l.calv"}]})");
  EXPECT_TRUE(message_contains([&] { load_manifest(fx.dir / "m.json"); }, "case_17"));

  fx.write_json(R"({"classes": ["bg", "fg"], "cases": [
      {"id": "good", "prediction": "good_p.calv", "label": "good_l.calv"},
      {"id": "good", "prediction": "good_p.calv", "label": "good_l.calv"}]})");
  EXPECT_TRUE(message_contains([&] { load_manifest(fx.dir / "m.json"); }, "duplicate"));

  fx.add_case("wide", 3);
  fx.write_json(R"({"classes": ["bg", "fg"], "cases": [
      {"id": "wide", "prediction": "wide_p.calv", "label": "wide_l.calv"}]})");
  EXPECT_TRUE(message_contains([&] { load_manifest(fx.dir / "m.json"); }, "wide"));

  fx.write_json(R"({"classes": ["bg", "fg"], "hec": {"all": [1, 2]}, "cases": [
      {"id": "good", "prediction": "good_p.calv", "label": "good_l.calv"}]})");
  EXPECT_TRUE(message_contains([&] { load_manifest(fx.dir / "m.json"); }, "all"));

  fx.write_json(R"({"classes": ["bg", "fg"], "cases": []})");
  EXPECT_THROW(load_manifest(fx.dir / "m.json"), IoError);
  fx.write_json("{not json");
  EXPECT_TRUE(message_contains([&] { load_manifest(fx.dir / "m.json"); }, "JSON"));
}

}  // namespace
}  // namespace segcal
