#include "segcal/volume_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "json.hpp"

namespace segcal {
namespace {

using json = nlohmann::ordered_json;

constexpr std::array<char, 5> kMagic = {'C', 'A', 'L', 'V', '1'};
constexpr std::size_t kMaxRank = 16;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return v;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// Parses the header; returns the payload offset.
std::size_t parse_header(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes,
                         TensorHeader& header) {
  constexpr std::size_t kFixed = kMagic.size() + 1 + 8;
  if (bytes.size() < kFixed) {
    throw IoError(path.string() + ": truncated header (" + std::to_string(bytes.size()) +
                  " bytes)");
  }
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
    throw IoError(path.string() + ": bad magic, not a CALV1 tensor");
  }
  const std::uint8_t code = bytes[kMagic.size()];
  if (code < 1 || code > 3) {
    throw IoError(path.string() + ": unknown dtype code " + std::to_string(code));
  }
  header.dtype = static_cast<DType>(code);
  const std::uint64_t rank = get_u64(bytes.data() + kMagic.size() + 1);
  if (rank > kMaxRank) throw IoError(path.string() + ": implausible rank " + std::to_string(rank));
  const std::size_t offset = kFixed + 8 * rank;
  if (bytes.size() < offset) {
    throw IoError(path.string() + ": truncated header, expected " + std::to_string(offset) +
                  " bytes, found " + std::to_string(bytes.size()));
  }
  header.dims.resize(rank);
  for (std::size_t k = 0; k < rank; ++k) header.dims[k] = get_u64(bytes.data() + kFixed + 8 * k);
  return offset;
}

template <class T>
T load_le(const std::uint8_t* p) {
  std::array<std::uint8_t, sizeof(T)> raw;
  std::memcpy(raw.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  T v;
  std::memcpy(&v, raw.data(), sizeof(T));
  return v;
}

template <class T>
void store_le(std::vector<std::uint8_t>& out, T v) {
  std::array<std::uint8_t, sizeof(T)> raw;
  std::memcpy(raw.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  out.insert(out.end(), raw.begin(), raw.end());
}

RawTensor float_tensor(std::size_t num_classes, const std::vector<std::size_t>& spatial,
                       std::span<const double> values) {
  RawTensor t;
  t.header.dtype = DType::kFloat32;
  t.header.dims.push_back(num_classes);
  for (auto d : spatial) t.header.dims.push_back(d);
  t.payload.reserve(values.size() * 4);
  for (double v : values) store_le(t.payload, static_cast<float>(v));
  return t;
}

ChannelVolume float_volume(const std::filesystem::path& path, const RawTensor& t) {
  if (t.header.dtype != DType::kFloat32) {
    throw IoError(path.string() + ": expected float32 payload");
  }
  if (t.header.dims.empty()) throw IoError(path.string() + ": expected dims (C, spatial...)");
  const std::size_t num_classes = t.header.dims.front();
  std::vector<std::size_t> spatial(t.header.dims.begin() + 1, t.header.dims.end());
  const std::size_t count = t.header.element_count();
  std::vector<double> values(count);
  for (std::size_t k = 0; k < count; ++k) {
    const float v = load_le<float>(t.payload.data() + 4 * k);
    if (!std::isfinite(v)) {
      throw IoError(path.string() + ": non-finite value at element " + std::to_string(k));
    }
    values[k] = v;
  }
  return ChannelVolume(num_classes, std::move(spatial), std::move(values));
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kFloat32: return 4;
    case DType::kUInt8: return 1;
    case DType::kUInt16: return 2;
  }
  return 0;
}

std::uint64_t TensorHeader::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

TensorHeader read_tensor_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes(kMagic.size() + 1 + 8);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  bytes.resize(static_cast<std::size_t>(in.gcount()));
  if (bytes.size() == kMagic.size() + 1 + 8) {
    const std::uint64_t rank = get_u64(bytes.data() + kMagic.size() + 1);
    if (rank <= kMaxRank) {
      std::vector<std::uint8_t> dims(8 * rank);
      in.read(reinterpret_cast<char*>(dims.data()), static_cast<std::streamsize>(dims.size()));
      dims.resize(static_cast<std::size_t>(in.gcount()));
      bytes.insert(bytes.end(), dims.begin(), dims.end());
    }
  }
  TensorHeader header;
  parse_header(path, bytes, header);
  return header;
}

RawTensor read_tensor(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_all(path);
  RawTensor t;
  const std::size_t offset = parse_header(path, bytes, t.header);
  const std::uint64_t expected = t.header.element_count() * dtype_size(t.header.dtype);
  const std::uint64_t actual = bytes.size() - offset;
  if (actual != expected) {
    throw IoError(path.string() + ": payload " + (actual < expected ? "truncated" : "oversized") +
                  ", expected " + std::to_string(expected) + " bytes, found " +
                  std::to_string(actual));
  }
  t.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return t;
}

void write_tensor(const std::filesystem::path& path, const RawTensor& tensor) {
  std::vector<std::uint8_t> bytes(kMagic.begin(), kMagic.end());
  bytes.push_back(static_cast<std::uint8_t>(tensor.header.dtype));
  put_u64(bytes, tensor.header.dims.size());
  for (auto d : tensor.header.dims) put_u64(bytes, d);
  bytes.insert(bytes.end(), tensor.payload.begin(), tensor.payload.end());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

void save_probabilities(const std::filesystem::path& path, const ProbabilityVolume& probs) {
  write_tensor(path, float_tensor(probs.num_classes(), probs.spatial_dims(), probs.field().values()));
}

ProbabilityVolume load_probabilities(const std::filesystem::path& path, ProbabilityKind kind) {
  ChannelVolume field = float_volume(path, read_tensor(path));
  try {
    return ProbabilityVolume(std::move(field), kind);
  } catch (const std::invalid_argument& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_logits(const std::filesystem::path& path, const ChannelVolume& logits) {
  write_tensor(path, float_tensor(logits.num_classes(), logits.spatial_dims(), logits.values()));
}

ChannelVolume load_logits(const std::filesystem::path& path) {
  return float_volume(path, read_tensor(path));
}

void save_labels(const std::filesystem::path& path, const LabelVolume& labels) {
  RawTensor t;
  t.header.dtype = labels.num_classes() <= 256 ? DType::kUInt8 : DType::kUInt16;
  for (auto d : labels.spatial_dims()) t.header.dims.push_back(d);
  for (std::uint16_t v : labels.indices()) {
    if (t.header.dtype == DType::kUInt8) {
      t.payload.push_back(static_cast<std::uint8_t>(v));
    } else {
      store_le(t.payload, v);
    }
  }
  write_tensor(path, t);
}

LabelVolume load_labels(const std::filesystem::path& path, std::size_t num_classes) {
  const RawTensor t = read_tensor(path);
  if (t.header.dtype == DType::kFloat32) throw IoError(path.string() + ": labels must be uint8/uint16");
  std::vector<std::size_t> spatial(t.header.dims.begin(), t.header.dims.end());
  const std::size_t count = t.header.element_count();
  std::vector<std::uint16_t> indices(count);
  for (std::size_t k = 0; k < count; ++k) {
    indices[k] = t.header.dtype == DType::kUInt8 ? t.payload[k]
                                                 : load_le<std::uint16_t>(t.payload.data() + 2 * k);
  }
  try {
    return LabelVolume::from_indices(num_classes, std::move(spatial), std::move(indices));
  } catch (const std::invalid_argument& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": malformed JSON: " + e.what());
  }
  const std::filesystem::path base = path.parent_path();
  DatasetManifest manifest;
  try {
    manifest.classes = doc.at("classes").get<std::vector<std::string>>();
    manifest.split = doc.value("split", std::string("test"));
    if (doc.contains("hec")) {
      for (const auto& [name, members] : doc.at("hec").items()) {
        manifest.hec.push_back({name, members.get<std::vector<std::size_t>>()});
      }
    }
    for (const auto& c : doc.at("cases")) {
      ManifestCase mc;
      mc.id = c.at("id").get<std::string>();
      mc.prediction = resolve(base, c.at("prediction").get<std::string>());
      mc.label = resolve(base, c.at("label").get<std::string>());
      if (c.contains("logits") && !c.at("logits").is_null()) {
        mc.logits = resolve(base, c.at("logits").get<std::string>());
      }
      if (c.contains("image") && !c.at("image").is_null()) {
        mc.image = resolve(base, c.at("image").get<std::string>());
      }
      manifest.cases.push_back(std::move(mc));
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": invalid manifest: " + e.what());
  }

  const std::size_t num_classes = manifest.classes.size();
  if (num_classes == 0) throw IoError(path.string() + ": manifest declares no classes");
  if (manifest.cases.empty()) throw IoError(path.string() + ": manifest has no cases");
  for (const HecClass& h : manifest.hec) {
    for (std::size_t m : h.members) {
      if (m >= num_classes) {
        throw IoError(path.string() + ": hierarchical class '" + h.name +
                      "' references unknown class " + std::to_string(m));
      }
    }
  }
  std::set<std::string> seen;
  for (const ManifestCase& mc : manifest.cases) {
    if (!seen.insert(mc.id).second) throw IoError(path.string() + ": duplicate case id '" + mc.id + "'");
    for (const auto* p : {&mc.prediction, &mc.label}) {
      if (!std::filesystem::exists(*p)) {
        throw IoError("case '" + mc.id + "': missing file " + p->string());
      }
    }
    if (mc.logits && !std::filesystem::exists(*mc.logits)) {
      throw IoError("case '" + mc.id + "': missing file " + mc.logits->string());
    }
    const TensorHeader pred = read_tensor_header(mc.prediction);
    if (pred.dims.empty() || pred.dims.front() != num_classes) {
      throw IoError("case '" + mc.id + "': prediction has " +
                    (pred.dims.empty() ? std::string("no") : std::to_string(pred.dims.front())) +
                    " channels, manifest declares " + std::to_string(num_classes) + " classes");
    }
    if (mc.logits) {
      const TensorHeader lg = read_tensor_header(*mc.logits);
      if (lg.dims != pred.dims) {
        throw IoError("case '" + mc.id + "': logits shape differs from prediction shape");
      }
    }
  }
  return manifest;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  const std::filesystem::path base = path.parent_path();
  auto rel = [&](const std::filesystem::path& p) {
    if (base.empty() || p.is_relative()) return p.generic_string();
    const std::filesystem::path r = p.lexically_relative(std::filesystem::absolute(base));
    return (r.empty() ? p : r).generic_string();
  };
  json doc;
  doc["classes"] = manifest.classes;
  doc["split"] = manifest.split;
  json hec = json::object();
  for (const HecClass& h : manifest.hec) hec[h.name] = h.members;
  doc["hec"] = hec;
  json cases = json::array();
  for (const ManifestCase& mc : manifest.cases) {
    json c;
    c["id"] = mc.id;
    c["prediction"] = rel(mc.prediction);
    c["label"] = rel(mc.label);
    if (mc.logits) c["logits"] = rel(*mc.logits);
    if (mc.image) c["image"] = rel(*mc.image);
    cases.push_back(std::move(c));
  }
  doc["cases"] = cases;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace segcal
