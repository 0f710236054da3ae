#ifndef SEGCAL_SRC_ACCESS_HPP_
#define SEGCAL_SRC_ACCESS_HPP_

#include <cstddef>

#include "segcal/binning.hpp"
#include "segcal/reliability.hpp"
#include "segcal/volume.hpp"

// Uniform read access to (probability, label) pairs so the tally and loss
// kernels are written once for owned volumes and borrowed spans.
namespace segcal::detail {

struct VolumeAccess {
  const ProbabilityVolume& probs;
  const LabelVolume& labels;

  std::size_t num_classes() const { return probs.num_classes(); }
  std::size_t num_voxels() const { return probs.num_voxels(); }
  double x(std::size_t c, std::size_t i) const { return probs.at(c, i); }
  double y(std::size_t c, std::size_t i) const { return labels.indicator(c, i); }
};

struct SpanAccess {
  const ProbabilitySpan& probs;
  const LabelSpan& labels;

  std::size_t num_classes() const { return probs.num_classes; }
  std::size_t num_voxels() const { return probs.num_voxels(); }
  double x(std::size_t c, std::size_t i) const {
    return static_cast<double>(probs.values[c * num_voxels() + i]);
  }
  double y(std::size_t c, std::size_t i) const {
    return static_cast<std::size_t>(labels.indices[i]) == c ? 1.0 : 0.0;
  }
};

template <class Access>
ReliabilityTally tally_access(const Access& access, const BinningConfig& config) {
  const std::size_t num_classes = access.num_classes();
  const std::size_t n = access.num_voxels();
  ReliabilityTally tally(num_classes, config);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < num_classes; ++c) tally.add(c, access.x(c, i), access.y(c, i));
    tally.count_voxel();
  }
  return tally;
}

}  // namespace segcal::detail

#endif  // SEGCAL_SRC_ACCESS_HPP_
