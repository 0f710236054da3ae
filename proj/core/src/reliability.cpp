#include "segcal/reliability.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "access.hpp"

namespace segcal {
namespace {

double mean_of(std::span<const double> values) {
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

double stddev_of(std::span<const double> values, double mean) {
  if (values.size() < 2) return 0.0;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

}  // namespace

void CompensatedSum::add(double v) {
  const double t = sum_ + v;
  if (std::abs(sum_) >= std::abs(v)) {
    compensation_ += (sum_ - t) + v;
  } else {
    compensation_ += (v - t) + sum_;
  }
  sum_ = t;
}

void CompensatedSum::merge(const CompensatedSum& other) {
  add(other.sum_);
  compensation_ += other.compensation_;
}

ReliabilityTally::ReliabilityTally(std::size_t num_classes, BinningConfig config)
    : num_classes_(num_classes),
      config_(config),
      foreground_(num_classes, 0),
      cells_(num_classes * static_cast<std::size_t>(config.num_bins())) {}

void ReliabilityTally::add(std::size_t c, double x, double y) {
  const std::size_t row = c * static_cast<std::size_t>(config_.num_bins());
  for (const BinWeight& bw : memberships(x, config_)) {
    TallyCell& cell = cells_[row + bw.bin];
    cell.sum_w.add(bw.weight);
    cell.sum_wx.add(bw.weight * x);
    cell.sum_wy.add(bw.weight * y);
  }
  if (y > 0.0) ++foreground_[c];
}

void ReliabilityTally::merge_from(const ReliabilityTally& other) {
  if (num_classes_ != other.num_classes_ || !(config_ == other.config_)) {
    throw std::invalid_argument("cannot merge tallies with different classes, bins or kernel");
  }
  num_voxels_ += other.num_voxels_;
  for (std::size_t c = 0; c < num_classes_; ++c) foreground_[c] += other.foreground_[c];
  for (std::size_t k = 0; k < cells_.size(); ++k) {
    cells_[k].sum_w.merge(other.cells_[k].sum_w);
    cells_[k].sum_wx.merge(other.cells_[k].sum_wx);
    cells_[k].sum_wy.merge(other.cells_[k].sum_wy);
  }
}

ReliabilityTally tally_image(const ProbabilityVolume& probs, const LabelVolume& labels,
                             const BinningConfig& config) {
  check_compatible(probs, labels);
  return detail::tally_access(detail::VolumeAccess{probs, labels}, config);
}

ReliabilityTally tally_image(const ProbabilitySpan& probs, const LabelSpan& labels,
                             const BinningConfig& config) {
  check_compatible(probs, labels);
  return detail::tally_access(detail::SpanAccess{probs, labels}, config);
}

ReliabilityTally merge(const ReliabilityTally& a, const ReliabilityTally& b) {
  ReliabilityTally out = a;
  out.merge_from(b);
  return out;
}

ReliabilityCurve::ReliabilityCurve(std::size_t num_classes, BinningConfig config)
    : foreground_voxels(num_classes, 0),
      num_classes_(num_classes),
      config_(config),
      bins_(num_classes * static_cast<std::size_t>(config.num_bins())) {}

ReliabilityCurve finalize(const ReliabilityTally& tally) {
  ReliabilityCurve curve(tally.num_classes(), tally.config());
  curve.num_voxels = tally.num_voxels();
  for (std::size_t c = 0; c < tally.num_classes(); ++c) {
    curve.foreground_voxels[c] = tally.foreground_voxels(c);
    for (int m = 0; m < tally.config().num_bins(); ++m) {
      const TallyCell& cell = tally.cell(c, m);
      BinStats& stats = curve.bin(c, m);
      const double w = cell.sum_w.value();
      if (w > 0.0) {
        stats.expected = cell.sum_wx.value() / w;
        stats.observed = cell.sum_wy.value() / w;
        stats.mass = w;
        stats.empty = false;
      } else {
        stats = BinStats{};
      }
    }
  }
  return curve;
}

std::string_view to_string(Averaging averaging) {
  return averaging == Averaging::kMacro ? "macro" : "micro";
}

std::string_view to_string(MissingClassPolicy policy) {
  return policy == MissingClassPolicy::kSkip ? "skip" : "include";
}

MissingClassPolicy parse_missing_policy(std::string_view name) {
  if (name == "skip") return MissingClassPolicy::kSkip;
  if (name == "include") return MissingClassPolicy::kInclude;
  throw std::invalid_argument("unknown missing-class policy '" + std::string(name) +
                              "' (expected skip|include)");
}

std::vector<bool> select_classes(std::span<const std::uint64_t> foreground_voxels,
                                 const ClassSelection& selection) {
  std::vector<bool> mask(foreground_voxels.size(), false);
  for (std::size_t c = 0; c < foreground_voxels.size(); ++c) {
    if (!selection.include_background && c == selection.background_class) continue;
    if (selection.missing == MissingClassPolicy::kSkip && foreground_voxels[c] == 0) continue;
    mask[c] = true;
  }
  return mask;
}

ClassMetrics class_metrics(const ReliabilityCurve& curve, std::size_t c) {
  const int num_bins = curve.num_bins();
  double gap_sum = 0.0;
  double weighted = 0.0;
  double total_mass = 0.0;
  double max_gap = 0.0;
  for (int m = 0; m < num_bins; ++m) {
    const BinStats& b = curve.bin(c, m);
    if (b.empty) continue;
    const double gap = std::abs(b.observed - b.expected);
    gap_sum += gap;
    weighted += b.mass * gap;
    total_mass += b.mass;
    max_gap = std::max(max_gap, gap);
  }
  ClassMetrics out;
  out.ace = gap_sum / num_bins;
  out.ece = total_mass > 0.0 ? weighted / total_mass : 0.0;
  out.mce = max_gap;
  return out;
}

CalibrationReport calibration_metrics(const ReliabilityCurve& curve,
                                      const std::vector<bool>& classes_included) {
  if (classes_included.size() != curve.num_classes()) {
    throw std::invalid_argument("class mask size does not match the curve");
  }
  CalibrationReport report;
  report.per_class.resize(curve.num_classes());
  report.included = classes_included;
  std::size_t count = 0;
  for (std::size_t c = 0; c < curve.num_classes(); ++c) {
    report.per_class[c] = class_metrics(curve, c);
    if (!classes_included[c]) continue;
    report.mean.ace += report.per_class[c].ace;
    report.mean.ece += report.per_class[c].ece;
    report.mean.mce += report.per_class[c].mce;
    ++count;
  }
  report.defined = count > 0;
  if (count > 0) {
    report.mean.ace /= static_cast<double>(count);
    report.mean.ece /= static_cast<double>(count);
    report.mean.mce /= static_cast<double>(count);
  }
  return report;
}

CalibrationReport image_report(const ProbabilityVolume& probs, const LabelVolume& labels,
                               const BinningConfig& config, const ClassSelection& selection) {
  const ReliabilityCurve curve = finalize(tally_image(probs, labels, config));
  return calibration_metrics(curve, select_classes(curve.foreground_voxels, selection));
}

CalibrationReport macro_report(std::span<const CalibrationReport> per_image) {
  if (per_image.empty()) throw std::invalid_argument("macro report needs at least one image");
  const std::size_t num_classes = per_image.front().per_class.size();
  CalibrationReport out;
  out.averaging = Averaging::kMacro;
  out.num_images = per_image.size();
  out.per_class.assign(num_classes, ClassMetrics{});
  out.included.assign(num_classes, false);

  std::vector<std::size_t> class_counts(num_classes, 0);
  std::vector<double> ace, ece, mce, dsc;
  bool all_have_dsc = true;
  for (const CalibrationReport& r : per_image) {
    if (r.per_class.size() != num_classes || r.included.size() != num_classes) {
      throw std::invalid_argument("per-image reports disagree on the class count");
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (!r.included[c]) continue;
      out.per_class[c].ace += r.per_class[c].ace;
      out.per_class[c].ece += r.per_class[c].ece;
      out.per_class[c].mce += r.per_class[c].mce;
      ++class_counts[c];
      out.included[c] = true;
    }
    if (r.defined) {
      ace.push_back(r.mean.ace);
      ece.push_back(r.mean.ece);
      mce.push_back(r.mean.mce);
    }
    if (r.dsc) {
      dsc.push_back(*r.dsc);
    } else {
      all_have_dsc = false;
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (class_counts[c] == 0) continue;
    const auto k = static_cast<double>(class_counts[c]);
    out.per_class[c].ace /= k;
    out.per_class[c].ece /= k;
    out.per_class[c].mce /= k;
  }
  out.defined = !ace.empty();
  if (out.defined) {
    out.mean = {mean_of(ace), mean_of(ece), mean_of(mce)};
    out.stddev = ClassMetrics{stddev_of(ace, out.mean.ace), stddev_of(ece, out.mean.ece),
                              stddev_of(mce, out.mean.mce)};
  }
  if (all_have_dsc && !dsc.empty()) {
    out.dsc = mean_of(dsc);
    out.dsc_stddev = stddev_of(dsc, *out.dsc);
  }
  return out;
}

CalibrationReport micro_report(const ReliabilityTally& dataset_tally,
                               const ClassSelection& selection) {
  const ReliabilityCurve curve = finalize(dataset_tally);
  CalibrationReport out =
      calibration_metrics(curve, select_classes(curve.foreground_voxels, selection));
  out.averaging = Averaging::kMicro;
  out.num_images = 0;
  return out;
}

DiceScores hard_dice(const ProbabilityVolume& probs, const LabelVolume& labels,
                     const std::vector<bool>& classes_included) {
  check_compatible(probs, labels);
  const std::size_t num_classes = probs.num_classes();
  const std::size_t n = probs.num_voxels();
  std::vector<std::uint8_t> predicted(num_classes * n, 0);
  if (probs.kind() == ProbabilityKind::kExclusive) {
    const auto winner = probs.argmax();
    for (std::size_t i = 0; i < n; ++i) predicted[winner[i] * n + i] = 1;
  } else {
    for (std::size_t c = 0; c < num_classes; ++c) {
      for (std::size_t i = 0; i < n; ++i) predicted[c * n + i] = probs.at(c, i) >= 0.5 ? 1 : 0;
    }
  }

  DiceScores out;
  out.per_class.assign(num_classes, 0.0);
  std::size_t count = 0;
  double sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t overlap = 0, pred = 0, truth = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool p = predicted[c * n + i] != 0;
      const bool t = labels.indicator(c, i) != 0;
      overlap += (p && t) ? 1 : 0;
      pred += p ? 1 : 0;
      truth += t ? 1 : 0;
    }
    out.per_class[c] =
        (pred + truth == 0) ? 1.0
                            : 2.0 * static_cast<double>(overlap) / static_cast<double>(pred + truth);
    if (c < classes_included.size() && classes_included[c]) {
      sum += out.per_class[c];
      ++count;
    }
  }
  out.defined = count > 0;
  out.mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
  return out;
}

ComposedVolumes compose_hierarchical_classes(const LabelVolume& labels,
                                             const ProbabilityVolume& probs,
                                             std::span<const HecClass> hec) {
  check_compatible(probs, labels);
  const std::size_t n = probs.num_voxels();
  const std::size_t out_classes = hec.size();
  std::vector<double> values(out_classes * n, 0.0);
  std::vector<std::uint8_t> indicators(out_classes * n, 0);
  for (std::size_t k = 0; k < out_classes; ++k) {
    for (std::size_t member : hec[k].members) {
      if (member >= probs.num_classes()) {
        throw std::invalid_argument("hierarchical class '" + hec[k].name +
                                    "' references unknown class " + std::to_string(member));
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double p = 0.0;
      std::uint8_t y = 0;
      for (std::size_t member : hec[k].members) {
        p += probs.at(member, i);
        y |= labels.indicator(member, i);
      }
      values[k * n + i] = std::clamp(p, 0.0, 1.0);
      indicators[k * n + i] = y;
    }
  }
  return ComposedVolumes{
      LabelVolume::from_indicators(out_classes, labels.spatial_dims(), std::move(indicators)),
      ProbabilityVolume(ChannelVolume(out_classes, probs.spatial_dims(), std::move(values)),
                        ProbabilityKind::kMultiLabel)};
}

}  // namespace segcal
