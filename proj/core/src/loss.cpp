#include "segcal/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "access.hpp"

namespace segcal {
namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

template <class Access>
AceForward forward_with(const Access& access, std::vector<std::size_t> spatial_dims,
                        const LossConfig& config) {
  const std::size_t num_classes = access.num_classes();
  const std::size_t n = access.num_voxels();
  const int num_bins = config.binning.num_bins();

  const ReliabilityCurve curve = finalize(detail::tally_access(access, config.binning));

  AceForward out;
  AceLossCache& cache = out.cache;
  cache.config = config;
  cache.num_classes = num_classes;
  cache.num_voxels = n;
  cache.spatial_dims = std::move(spatial_dims);
  cache.included = select_classes(curve.foreground_voxels, config.classes);
  cache.num_included = static_cast<std::size_t>(
      std::count(cache.included.begin(), cache.included.end(), true));

  const std::size_t cells = num_classes * static_cast<std::size_t>(num_bins);
  cache.expected.resize(cells);
  cache.observed.resize(cells);
  cache.mass.resize(cells);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (int m = 0; m < num_bins; ++m) {
      const BinStats& b = curve.bin(c, m);
      const std::size_t k = c * static_cast<std::size_t>(num_bins) + m;
      cache.expected[k] = b.expected;
      cache.observed[k] = b.observed;
      cache.mass[k] = b.mass;
    }
  }

  cache.memberships.resize(num_classes * n);
  cache.x.resize(num_classes * n);
  cache.y.resize(num_classes * n);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = c * n + i;
      cache.x[k] = access.x(c, i);
      cache.y[k] = access.y(c, i);
      if (cache.included[c]) cache.memberships[k] = memberships(cache.x[k], config.binning);
    }
  }

  if (cache.num_included > 0) out.value = calibration_metrics(curve, cache.included).mean.ace;
  return out;
}

}  // namespace

bool AceLossCache::consistent() const {
  const std::size_t cells = num_classes * static_cast<std::size_t>(config.binning.num_bins());
  const std::size_t field = num_classes * num_voxels;
  return num_classes > 0 && included.size() == num_classes && expected.size() == cells &&
         observed.size() == cells && mass.size() == cells && memberships.size() == field &&
         x.size() == field && y.size() == field && voxel_count(spatial_dims) == num_voxels;
}

AceForward ace_loss_forward(const ProbabilityVolume& probs, const LabelVolume& labels,
                            const LossConfig& config) {
  check_compatible(probs, labels);
  return forward_with(detail::VolumeAccess{probs, labels}, probs.spatial_dims(), config);
}

AceForward ace_loss_forward(const ProbabilitySpan& probs, const LabelSpan& labels,
                            const LossConfig& config) {
  check_compatible(probs, labels);
  return forward_with(detail::SpanAccess{probs, labels}, {probs.num_voxels()}, config);
}

ChannelVolume ace_loss_backward(const AceLossCache& cache) {
  if (!cache.consistent()) throw std::invalid_argument("ACE backward called with a stale or empty cache");
  ChannelVolume grad(cache.num_classes, cache.spatial_dims);
  if (cache.num_included == 0) return grad;

  const int num_bins = cache.config.binning.num_bins();
  const double scale = 1.0 / (static_cast<double>(cache.num_included) * num_bins);
  const std::size_t n = cache.num_voxels;
  for (std::size_t c = 0; c < cache.num_classes; ++c) {
    if (!cache.included[c]) continue;
    const std::size_t row = c * static_cast<std::size_t>(num_bins);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = c * n + i;
      double g = 0.0;
      for (const BinWeight& bw : cache.memberships[k]) {
        const double mass = cache.mass[row + bw.bin];
        if (mass <= 0.0) continue;
        const double e = cache.expected[row + bw.bin];
        const double o = cache.observed[row + bw.bin];
        const double de = (bw.weight + bw.derivative * (cache.x[k] - e)) / mass;
        const double dobs = bw.derivative * (cache.y[k] - o) / mass;
        g += sign(o - e) * (dobs - de);
      }
      grad.at(c, i) = scale * g;
    }
  }
  return grad;
}

LossOutput ace_loss(const ProbabilityVolume& probs, const LabelVolume& labels,
                    const LossConfig& config) {
  AceForward fwd = ace_loss_forward(probs, labels, config);
  return LossOutput{fwd.value, ace_loss_backward(fwd.cache)};
}

ChannelVolume loss_grad_logits(const ChannelVolume& grad_probs, const ProbabilityVolume& probs) {
  if (!grad_probs.same_shape(probs.field())) {
    throw std::invalid_argument("gradient and probability volumes differ in shape");
  }
  const std::size_t num_classes = probs.num_classes();
  const std::size_t n = probs.num_voxels();
  ChannelVolume out(num_classes, probs.spatial_dims());
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t k = 0; k < num_classes; ++k) dot += grad_probs.at(k, i) * probs.at(k, i);
    for (std::size_t c = 0; c < num_classes; ++c) {
      out.at(c, i) = probs.at(c, i) * (grad_probs.at(c, i) - dot);
    }
  }
  return out;
}

namespace {

void add_cross_entropy(const ProbabilityVolume& probs, const LabelVolume& labels,
                       DiceCeOutput& out) {
  const std::size_t n = probs.num_voxels();
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t c = 0; c < probs.num_classes(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!labels.indicator(c, i)) continue;
      const double p = probs.at(c, i);
      const double clamped = std::clamp(p, kCrossEntropyClamp, 1.0 - kCrossEntropyClamp);
      total -= std::log(clamped);
      if (p == clamped) out.grad_probs.at(c, i) -= inv_n / p;
    }
  }
  out.cross_entropy = total * inv_n;
}

}  // namespace

DiceCeOutput dice_ce_loss(const ProbabilityVolume& probs, const LabelVolume& labels,
                          const ClassSelection& classes) {
  check_compatible(probs, labels);
  const std::size_t num_classes = probs.num_classes();
  const std::size_t n = probs.num_voxels();
  DiceCeOutput out;
  out.grad_probs = ChannelVolume(num_classes, probs.spatial_dims());

  std::vector<std::uint64_t> foreground(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) foreground[c] = labels.foreground_count(c);
  const std::vector<bool> included = select_classes(foreground, classes);
  const auto num_included =
      static_cast<std::size_t>(std::count(included.begin(), included.end(), true));

  if (num_included > 0) {
    const double weight = 1.0 / static_cast<double>(num_included);
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (!included[c]) continue;
      double intersection = 0.0;
      double sum_p = 0.0;
      double sum_g = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double p = probs.at(c, i);
        const double g = labels.indicator(c, i);
        intersection += p * g;
        sum_p += p;
        sum_g += g;
      }
      const double numer = 2.0 * intersection + kDiceSmoothing;
      const double denom = sum_p + sum_g + kDiceSmoothing;
      out.dice += weight * (1.0 - numer / denom);
      for (std::size_t i = 0; i < n; ++i) {
        const double g = labels.indicator(c, i);
        out.grad_probs.at(c, i) -= weight * (2.0 * g * denom - numer) / (denom * denom);
      }
    }
  }

  add_cross_entropy(probs, labels, out);
  out.value = out.dice + out.cross_entropy;
  return out;
}

DiceCeOutput cross_entropy_loss(const ProbabilityVolume& probs, const LabelVolume& labels) {
  check_compatible(probs, labels);
  DiceCeOutput out;
  out.grad_probs = ChannelVolume(probs.num_classes(), probs.spatial_dims());
  add_cross_entropy(probs, labels, out);
  out.value = out.cross_entropy;
  return out;
}

CompositeOutput composite_loss(const ProbabilityVolume& probs, const LabelVolume& labels,
                               double lambda, const LossConfig& config) {
  if (!(lambda >= 0.0)) {
    throw std::invalid_argument("ACE weight must be nonnegative, got " + std::to_string(lambda));
  }
  DiceCeOutput base = dice_ce_loss(probs, labels, config.classes);
  CompositeOutput out;
  out.dice_ce = base.value;
  out.grad_probs = std::move(base.grad_probs);
  if (lambda == 0.0) {
    out.value = out.dice_ce;
    return out;
  }
  LossOutput ace = ace_loss(probs, labels, config);
  out.ace = ace.value;
  out.value = out.dice_ce + lambda * ace.value;
  auto grad = out.grad_probs.values();
  auto ace_grad = ace.grad_probs.values();
  for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += lambda * ace_grad[k];
  return out;
}

}  // namespace segcal
