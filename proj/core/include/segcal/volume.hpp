#ifndef SEGCAL_VOLUME_HPP_
#define SEGCAL_VOLUME_HPP_

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace segcal {

// Per-voxel channel sums of exclusive probability volumes must be within this
// of 1. Loose enough for half-precision network outputs.
inline constexpr double kNormalizationTolerance = 1e-4;

std::size_t voxel_count(std::span<const std::size_t> spatial_dims);

// Dense channel-major field: value(c, i) lives at c * num_voxels + i.
// Used for logits, gradients and as the storage of ProbabilityVolume.
class ChannelVolume {
 public:
  ChannelVolume() = default;
  ChannelVolume(std::size_t num_classes, std::vector<std::size_t> spatial_dims);
  ChannelVolume(std::size_t num_classes, std::vector<std::size_t> spatial_dims,
                std::vector<double> values);

  std::size_t num_classes() const { return num_classes_; }
  std::size_t num_voxels() const { return num_voxels_; }
  const std::vector<std::size_t>& spatial_dims() const { return spatial_dims_; }

  double at(std::size_t c, std::size_t i) const { return values_[c * num_voxels_ + i]; }
  double& at(std::size_t c, std::size_t i) { return values_[c * num_voxels_ + i]; }

  std::span<const double> channel(std::size_t c) const;
  std::span<double> channel(std::size_t c);
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }

  bool same_shape(const ChannelVolume& other) const;

  friend bool operator==(const ChannelVolume&, const ChannelVolume&) = default;

 private:
  std::size_t num_classes_ = 0;
  std::size_t num_voxels_ = 0;
  std::vector<std::size_t> spatial_dims_;
  std::vector<double> values_;
};

// Exclusive: channels of one voxel form a distribution (softmax output).
// MultiLabel: channels are independent foreground probabilities, e.g. after
// composing overlapping hierarchical classes.
enum class ProbabilityKind { kExclusive, kMultiLabel };

class ProbabilityVolume {
 public:
  ProbabilityVolume() = default;
  // Validates range, finiteness and (for exclusive volumes) normalization;
  // throws std::invalid_argument naming the first offending voxel.
  ProbabilityVolume(ChannelVolume field, ProbabilityKind kind = ProbabilityKind::kExclusive);

  std::size_t num_classes() const { return field_.num_classes(); }
  std::size_t num_voxels() const { return field_.num_voxels(); }
  const std::vector<std::size_t>& spatial_dims() const { return field_.spatial_dims(); }
  ProbabilityKind kind() const { return kind_; }

  double at(std::size_t c, std::size_t i) const { return field_.at(c, i); }
  std::span<const double> channel(std::size_t c) const { return field_.channel(c); }
  const ChannelVolume& field() const { return field_; }

  // Index of the most probable class per voxel (ties go to the lower index).
  std::vector<std::uint16_t> argmax() const;

  friend bool operator==(const ProbabilityVolume&, const ProbabilityVolume&) = default;

 private:
  ChannelVolume field_;
  ProbabilityKind kind_ = ProbabilityKind::kExclusive;
};

// Ground truth for one image, either as a class index per voxel or as
// channel-major multi-hot indicators (overlapping composite classes).
class LabelVolume {
 public:
  LabelVolume() = default;

  static LabelVolume from_indices(std::size_t num_classes, std::vector<std::size_t> spatial_dims,
                                  std::vector<std::uint16_t> indices);
  static LabelVolume from_indicators(std::size_t num_classes,
                                     std::vector<std::size_t> spatial_dims,
                                     std::vector<std::uint8_t> indicators);

  std::size_t num_classes() const { return num_classes_; }
  std::size_t num_voxels() const { return num_voxels_; }
  const std::vector<std::size_t>& spatial_dims() const { return spatial_dims_; }
  bool is_indexed() const { return indexed_; }

  // Y^c_i in {0, 1}.
  std::uint8_t indicator(std::size_t c, std::size_t i) const {
    return indexed_ ? static_cast<std::uint8_t>(indices_[i] == c)
                    : indicators_[c * num_voxels_ + i];
  }

  // Index form only; throws std::logic_error for multi-hot labels.
  std::span<const std::uint16_t> indices() const;
  std::vector<std::uint8_t> one_hot() const;
  std::size_t foreground_count(std::size_t c) const;

  friend bool operator==(const LabelVolume&, const LabelVolume&) = default;

 private:
  std::size_t num_classes_ = 0;
  std::size_t num_voxels_ = 0;
  std::vector<std::size_t> spatial_dims_;
  bool indexed_ = true;
  std::vector<std::uint16_t> indices_;
  std::vector<std::uint8_t> indicators_;
};

// Throws std::invalid_argument unless probs and labels agree on class count
// and spatial shape.
void check_compatible(const ProbabilityVolume& probs, const LabelVolume& labels);

// Non-owning views over caller memory for foreign callers that hand over
// float32 probabilities and int64 class indices without copying. Layout is
// channel-major like ChannelVolume.
struct ProbabilitySpan {
  std::span<const float> values;
  std::size_t num_classes = 0;

  std::size_t num_voxels() const { return num_classes == 0 ? 0 : values.size() / num_classes; }
};

struct LabelSpan {
  std::span<const std::int64_t> indices;
};

// Full validation of a span pair: sizes, probability range and
// normalization, label bounds.
void check_compatible(const ProbabilitySpan& probs, const LabelSpan& labels);

}  // namespace segcal

#endif  // SEGCAL_VOLUME_HPP_
