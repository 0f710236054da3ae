#ifndef SEGCAL_VOLUME_IO_HPP_
#define SEGCAL_VOLUME_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "segcal/reliability.hpp"
#include "segcal/volume.hpp"

namespace segcal {

// Raised for unreadable, malformed or inconsistent files. Messages name the
// offending file or case.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor container, all integers little-endian:
//   "CALV1"      5 bytes magic
//   dtype        u8   (1 = float32, 2 = uint8, 3 = uint16)
//   rank         u64
//   dims[rank]   u64 each
//   payload      prod(dims) elements, row-major, little-endian
enum class DType : std::uint8_t { kFloat32 = 1, kUInt8 = 2, kUInt16 = 3 };

std::size_t dtype_size(DType dtype);

struct TensorHeader {
  DType dtype = DType::kFloat32;
  std::vector<std::uint64_t> dims;

  std::uint64_t element_count() const;
};

struct RawTensor {
  TensorHeader header;
  std::vector<std::uint8_t> payload;
};

TensorHeader read_tensor_header(const std::filesystem::path& path);
RawTensor read_tensor(const std::filesystem::path& path);
void write_tensor(const std::filesystem::path& path, const RawTensor& tensor);

// Probabilities and logits are stored as float32 with dims (C, spatial...).
// Loading probabilities validates range, finiteness and normalization.
void save_probabilities(const std::filesystem::path& path, const ProbabilityVolume& probs);
ProbabilityVolume load_probabilities(const std::filesystem::path& path,
                                     ProbabilityKind kind = ProbabilityKind::kExclusive);

void save_logits(const std::filesystem::path& path, const ChannelVolume& logits);
ChannelVolume load_logits(const std::filesystem::path& path);

// Index labels with dims (spatial...), uint8 when C <= 256, else uint16.
void save_labels(const std::filesystem::path& path, const LabelVolume& labels);
LabelVolume load_labels(const std::filesystem::path& path, std::size_t num_classes);

struct ManifestCase {
  std::string id;
  std::filesystem::path prediction;
  std::filesystem::path label;
  std::optional<std::filesystem::path> logits;
  // Source image; carried as an opaque reference.
  std::optional<std::filesystem::path> image;
};

// JSON: {"classes": [...], "split": "...", "hec": {"name": [classes...]},
//        "cases": [{"id", "prediction", "label", "logits"?, "image"?}]}
// Relative paths resolve against the manifest's directory.
struct DatasetManifest {
  std::vector<std::string> classes;
  std::vector<HecClass> hec;
  std::string split = "test";
  std::vector<ManifestCase> cases;

  std::size_t num_classes() const { return classes.size(); }
};

// Validates: nonempty cases, unique ids, referenced files exist, prediction
// and logits headers carry C = classes.size() channels, HEC members < C.
DatasetManifest load_manifest(const std::filesystem::path& path);
// Writes paths relative to the manifest directory when possible.
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

}  // namespace segcal

#endif  // SEGCAL_VOLUME_IO_HPP_
