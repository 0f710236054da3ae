#include "segcal/volume.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

namespace segcal {

std::size_t voxel_count(std::span<const std::size_t> spatial_dims) {
  return std::accumulate(spatial_dims.begin(), spatial_dims.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

ChannelVolume::ChannelVolume(std::size_t num_classes, std::vector<std::size_t> spatial_dims)
    : num_classes_(num_classes),
      num_voxels_(voxel_count(spatial_dims)),
      spatial_dims_(std::move(spatial_dims)),
      values_(num_classes_ * num_voxels_, 0.0) {}

ChannelVolume::ChannelVolume(std::size_t num_classes, std::vector<std::size_t> spatial_dims,
                             std::vector<double> values)
    : num_classes_(num_classes),
      num_voxels_(voxel_count(spatial_dims)),
      spatial_dims_(std::move(spatial_dims)),
      values_(std::move(values)) {
  if (values_.size() != num_classes_ * num_voxels_) {
    throw std::invalid_argument("channel volume holds " + std::to_string(values_.size()) +
                                " values, shape requires " +
                                std::to_string(num_classes_ * num_voxels_));
  }
}

std::span<const double> ChannelVolume::channel(std::size_t c) const {
  return std::span<const double>(values_).subspan(c * num_voxels_, num_voxels_);
}

std::span<double> ChannelVolume::channel(std::size_t c) {
  return std::span<double>(values_).subspan(c * num_voxels_, num_voxels_);
}

bool ChannelVolume::same_shape(const ChannelVolume& other) const {
  return num_classes_ == other.num_classes_ && spatial_dims_ == other.spatial_dims_;
}

ProbabilityVolume::ProbabilityVolume(ChannelVolume field, ProbabilityKind kind)
    : field_(std::move(field)), kind_(kind) {
  if (field_.num_classes() == 0) throw std::invalid_argument("probability volume has no classes");
  const std::size_t n = field_.num_voxels();
  for (std::size_t c = 0; c < field_.num_classes(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      const double x = field_.at(c, i);
      if (!(x >= 0.0 && x <= 1.0)) {
        throw std::invalid_argument("probability " + std::to_string(x) + " at class " +
                                    std::to_string(c) + ", voxel " + std::to_string(i) +
                                    " is not in [0, 1]");
      }
    }
  }
  if (kind_ != ProbabilityKind::kExclusive) return;
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < field_.num_classes(); ++c) sum += field_.at(c, i);
    if (std::abs(sum - 1.0) > kNormalizationTolerance) {
      throw std::invalid_argument("class probabilities at voxel " + std::to_string(i) +
                                  " sum to " + std::to_string(sum));
    }
  }
}

std::vector<std::uint16_t> ProbabilityVolume::argmax() const {
  std::vector<std::uint16_t> out(num_voxels(), 0);
  for (std::size_t c = 1; c < num_classes(); ++c) {
    for (std::size_t i = 0; i < num_voxels(); ++i) {
      if (at(c, i) > at(out[i], i)) out[i] = static_cast<std::uint16_t>(c);
    }
  }
  return out;
}

LabelVolume LabelVolume::from_indices(std::size_t num_classes,
                                      std::vector<std::size_t> spatial_dims,
                                      std::vector<std::uint16_t> indices) {
  LabelVolume out;
  out.num_classes_ = num_classes;
  out.num_voxels_ = voxel_count(spatial_dims);
  out.spatial_dims_ = std::move(spatial_dims);
  out.indexed_ = true;
  if (indices.size() != out.num_voxels_) {
    throw std::invalid_argument("label volume holds " + std::to_string(indices.size()) +
                                " indices, shape requires " + std::to_string(out.num_voxels_));
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= num_classes) {
      throw std::invalid_argument("label index " + std::to_string(indices[i]) + " at voxel " +
                                  std::to_string(i) + " is >= class count " +
                                  std::to_string(num_classes));
    }
  }
  out.indices_ = std::move(indices);
  return out;
}

LabelVolume LabelVolume::from_indicators(std::size_t num_classes,
                                         std::vector<std::size_t> spatial_dims,
                                         std::vector<std::uint8_t> indicators) {
  LabelVolume out;
  out.num_classes_ = num_classes;
  out.num_voxels_ = voxel_count(spatial_dims);
  out.spatial_dims_ = std::move(spatial_dims);
  out.indexed_ = false;
  if (indicators.size() != num_classes * out.num_voxels_) {
    throw std::invalid_argument("indicator volume holds " + std::to_string(indicators.size()) +
                                " values, shape requires " +
                                std::to_string(num_classes * out.num_voxels_));
  }
  for (auto v : indicators) {
    if (v > 1) throw std::invalid_argument("indicator values must be 0 or 1");
  }
  out.indicators_ = std::move(indicators);
  return out;
}

std::span<const std::uint16_t> LabelVolume::indices() const {
  if (!indexed_) throw std::logic_error("multi-hot label volume has no index form");
  return indices_;
}

std::vector<std::uint8_t> LabelVolume::one_hot() const {
  if (!indexed_) return indicators_;
  std::vector<std::uint8_t> out(num_classes_ * num_voxels_, 0);
  for (std::size_t i = 0; i < num_voxels_; ++i) out[indices_[i] * num_voxels_ + i] = 1;
  return out;
}

std::size_t LabelVolume::foreground_count(std::size_t c) const {
  std::size_t count = 0;
  for (std::size_t i = 0; i < num_voxels_; ++i) count += indicator(c, i);
  return count;
}

void check_compatible(const ProbabilityVolume& probs, const LabelVolume& labels) {
  if (probs.num_classes() != labels.num_classes()) {
    throw std::invalid_argument("class count mismatch: probabilities have " +
                                std::to_string(probs.num_classes()) + ", labels have " +
                                std::to_string(labels.num_classes()));
  }
  if (probs.spatial_dims() != labels.spatial_dims()) {
    throw std::invalid_argument("spatial shape mismatch between probabilities and labels");
  }
}

void check_compatible(const ProbabilitySpan& probs, const LabelSpan& labels) {
  if (probs.num_classes == 0) throw std::invalid_argument("probability span has no classes");
  if (probs.values.size() % probs.num_classes != 0) {
    throw std::invalid_argument("probability span size is not a multiple of the class count");
  }
  const std::size_t n = probs.num_voxels();
  if (labels.indices.size() != n) {
    throw std::invalid_argument("label span holds " + std::to_string(labels.indices.size()) +
                                " voxels, probabilities hold " + std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = labels.indices[i];
    if (y < 0 || static_cast<std::size_t>(y) >= probs.num_classes) {
      throw std::invalid_argument("label index " + std::to_string(y) + " at voxel " +
                                  std::to_string(i) + " outside [0, " +
                                  std::to_string(probs.num_classes) + ")");
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < probs.num_classes; ++c) {
      const double x = probs.values[c * n + i];
      if (!(x >= 0.0 && x <= 1.0)) {
        throw std::invalid_argument("probability " + std::to_string(x) + " at class " +
                                    std::to_string(c) + ", voxel " + std::to_string(i) +
                                    " is not in [0, 1]");
      }
      sum += x;
    }
    if (std::abs(sum - 1.0) > kNormalizationTolerance) {
      throw std::invalid_argument("class probabilities at voxel " + std::to_string(i) +
                                  " sum to " + std::to_string(sum));
    }
  }
}

}  // namespace segcal
