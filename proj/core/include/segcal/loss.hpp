#ifndef SEGCAL_LOSS_HPP_
#define SEGCAL_LOSS_HPP_

#include <cstddef>
#include <vector>

#include "segcal/binning.hpp"
#include "segcal/reliability.hpp"
#include "segcal/volume.hpp"

namespace segcal {

inline constexpr double kDiceSmoothing = 1.0;
inline constexpr double kCrossEntropyClamp = 1e-7;

struct LossConfig {
  BinningConfig binning{BinningConfig::kDefaultBins, Kernel::kSoft};
  // Classes without ground-truth foreground are zeroed under the default
  // skip policy and the normalization runs over the remaining C' classes.
  ClassSelection classes{};
};

// State the ACE backward pass needs: finalized per-(class, bin) statistics
// and per-voxel memberships of every class that contributes to the loss.
struct AceLossCache {
  LossConfig config;
  std::size_t num_classes = 0;
  std::size_t num_voxels = 0;
  std::vector<std::size_t> spatial_dims;
  std::vector<bool> included;
  std::size_t num_included = 0;
  std::vector<double> expected;  // (c, m)
  std::vector<double> observed;  // (c, m)
  std::vector<double> mass;      // (c, m)
  std::vector<Memberships> memberships;  // (c, i), filled for included classes
  std::vector<double> x;                 // (c, i)
  std::vector<double> y;                 // (c, i)

  // True when the sizes of all buffers agree with the recorded shape.
  bool consistent() const;
};

struct AceForward {
  double value = 0.0;
  AceLossCache cache;
};

struct LossOutput {
  double value = 0.0;
  ChannelVolume grad_probs;
};

// Marginal L1 average calibration error as a loss:
//   L = 1 / (C' M) * sum_{c included} sum_m |o^c_m - e^c_m|
// with e and o weighted by the configured kernel. Empty bins add nothing.
AceForward ace_loss_forward(const ProbabilityVolume& probs, const LabelVolume& labels,
                            const LossConfig& config);
AceForward ace_loss_forward(const ProbabilitySpan& probs, const LabelSpan& labels,
                            const LossConfig& config);

// dL/dx for every (class, voxel). Bin membership is treated as locally
// constant for the hard kernel; sign(0) = 0. Throws std::invalid_argument on
// an empty or inconsistent cache.
ChannelVolume ace_loss_backward(const AceLossCache& cache);

LossOutput ace_loss(const ProbabilityVolume& probs, const LabelVolume& labels,
                    const LossConfig& config);

// Chains dL/dp through a softmax: g_z[c] = p[c] * (g_p[c] - sum_k g_p[k] p[k]).
ChannelVolume loss_grad_logits(const ChannelVolume& grad_probs, const ProbabilityVolume& probs);

struct DiceCeOutput {
  double value = 0.0;
  double dice = 0.0;
  double cross_entropy = 0.0;
  ChannelVolume grad_probs;
};

// Soft Dice averaged over the selected present classes (smoothing 1) plus
// voxel-mean cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7].
DiceCeOutput dice_ce_loss(const ProbabilityVolume& probs, const LabelVolume& labels,
                          const ClassSelection& classes = {});

// Voxel-mean cross-entropy alone (the CE-only training baseline).
DiceCeOutput cross_entropy_loss(const ProbabilityVolume& probs, const LabelVolume& labels);

struct CompositeOutput {
  double value = 0.0;
  double dice_ce = 0.0;
  double ace = 0.0;
  ChannelVolume grad_probs;
};

// Dice + CE + lambda * ACE. Throws std::invalid_argument for negative lambda.
CompositeOutput composite_loss(const ProbabilityVolume& probs, const LabelVolume& labels,
                               double lambda, const LossConfig& config);

}  // namespace segcal

#endif  // SEGCAL_LOSS_HPP_
