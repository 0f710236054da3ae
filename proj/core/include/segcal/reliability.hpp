#ifndef SEGCAL_RELIABILITY_HPP_
#define SEGCAL_RELIABILITY_HPP_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segcal/binning.hpp"
#include "segcal/volume.hpp"

namespace segcal {

// Neumaier-compensated running sum. Merging two sums keeps the compensation
// terms, so chunked and single-pass accumulation agree to rounding of the
// final value.
class CompensatedSum {
 public:
  void add(double v);
  void merge(const CompensatedSum& other);
  double value() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

// Sufficient statistics of one bin of one class.
struct TallyCell {
  CompensatedSum sum_w;   // sum of memberships
  CompensatedSum sum_wx;  // membership-weighted predicted probability
  CompensatedSum sum_wy;  // membership-weighted ground-truth indicator
};

// Mergeable per-(class, bin) reliability statistics. Everything downstream
// (curves, metrics, diagrams, micro averaging) is computed from these.
class ReliabilityTally {
 public:
  ReliabilityTally(std::size_t num_classes, BinningConfig config);

  std::size_t num_classes() const { return num_classes_; }
  const BinningConfig& config() const { return config_; }
  std::uint64_t num_voxels() const { return num_voxels_; }
  std::uint64_t foreground_voxels(std::size_t c) const { return foreground_[c]; }

  const TallyCell& cell(std::size_t c, int m) const {
    return cells_[c * static_cast<std::size_t>(config_.num_bins()) + m];
  }

  // Accumulates one voxel of one class. Callers adding a whole voxel must
  // call this for every class and then count_voxel() once.
  void add(std::size_t c, double x, double y);
  void count_voxel() { ++num_voxels_; }

  // Componentwise sum; throws std::invalid_argument on class/bin/kernel
  // mismatch.
  void merge_from(const ReliabilityTally& other);

 private:
  std::size_t num_classes_;
  BinningConfig config_;
  std::uint64_t num_voxels_ = 0;
  std::vector<std::uint64_t> foreground_;
  std::vector<TallyCell> cells_;
};

ReliabilityTally tally_image(const ProbabilityVolume& probs, const LabelVolume& labels,
                             const BinningConfig& config);
ReliabilityTally tally_image(const ProbabilitySpan& probs, const LabelSpan& labels,
                             const BinningConfig& config);

ReliabilityTally merge(const ReliabilityTally& a, const ReliabilityTally& b);

struct BinStats {
  double expected = 0.0;  // e: mean predicted foreground probability
  double observed = 0.0;  // o: observed foreground frequency
  double mass = 0.0;      // n: sum of memberships
  bool empty = true;
};

class ReliabilityCurve {
 public:
  ReliabilityCurve(std::size_t num_classes, BinningConfig config);

  std::size_t num_classes() const { return num_classes_; }
  const BinningConfig& config() const { return config_; }
  int num_bins() const { return config_.num_bins(); }

  const BinStats& bin(std::size_t c, int m) const {
    return bins_[c * static_cast<std::size_t>(config_.num_bins()) + m];
  }
  BinStats& bin(std::size_t c, int m) {
    return bins_[c * static_cast<std::size_t>(config_.num_bins()) + m];
  }

  std::uint64_t num_voxels = 0;
  // Ground-truth foreground voxels per class; drives class presence.
  std::vector<std::uint64_t> foreground_voxels;

 private:
  std::size_t num_classes_;
  BinningConfig config_;
  std::vector<BinStats> bins_;
};

// e = sum_wx / sum_w, o = sum_wy / sum_w. Bins with zero mass are flagged
// empty and carry zeros.
ReliabilityCurve finalize(const ReliabilityTally& tally);

enum class Averaging { kMacro, kMicro };
enum class MissingClassPolicy { kSkip, kInclude };

std::string_view to_string(Averaging averaging);
std::string_view to_string(MissingClassPolicy policy);
MissingClassPolicy parse_missing_policy(std::string_view name);

// Which classes enter class averages.
struct ClassSelection {
  bool include_background = false;
  std::size_t background_class = 0;
  MissingClassPolicy missing = MissingClassPolicy::kSkip;
};

// Mask of classes that take part in class averages: background excluded
// unless requested, and classes without ground-truth foreground excluded
// under the skip policy.
std::vector<bool> select_classes(std::span<const std::uint64_t> foreground_voxels,
                                 const ClassSelection& selection);

struct ClassMetrics {
  double ace = 0.0;
  double ece = 0.0;
  double mce = 0.0;
};

struct CalibrationReport {
  Averaging averaging = Averaging::kMacro;
  std::vector<ClassMetrics> per_class;
  // Classes that entered the class average (per image: present and selected;
  // macro: selected in at least one image).
  std::vector<bool> included;
  ClassMetrics mean;
  // Spread of the class-averaged metrics across images (macro only).
  std::optional<ClassMetrics> stddev;
  std::optional<double> dsc;
  std::optional<double> dsc_stddev;
  std::size_t num_images = 1;
  // False when no class was eligible for averaging.
  bool defined = false;
};

// ACE = (1/M) sum_m |o - e|, ECE = sum_m (n_m / N_c) |o - e| with
// N_c = sum_m n_m, MCE = max_m |o - e|; empty bins contribute a zero gap.
ClassMetrics class_metrics(const ReliabilityCurve& curve, std::size_t c);

CalibrationReport calibration_metrics(const ReliabilityCurve& curve,
                                      const std::vector<bool>& classes_included);

// Per-image report: tally, finalize, select classes, compute metrics.
CalibrationReport image_report(const ProbabilityVolume& probs, const LabelVolume& labels,
                               const BinningConfig& config, const ClassSelection& selection);

// Mean over images of each per-class metric, skipping (image, class) pairs
// not included in that image. The class-averaged value is the mean of the
// per-image class averages over images that have one; stddev is across the
// same images. Throws std::invalid_argument on an empty list or mismatched
// class counts.
CalibrationReport macro_report(std::span<const CalibrationReport> per_image);

CalibrationReport micro_report(const ReliabilityTally& dataset_tally,
                               const ClassSelection& selection);

// Hard (argmax) Dice per class. Classes with no ground truth and no
// prediction score 1; the mean runs over `classes_included`.
struct DiceScores {
  std::vector<double> per_class;
  double mean = 0.0;
  bool defined = false;
};
DiceScores hard_dice(const ProbabilityVolume& probs, const LabelVolume& labels,
                     const std::vector<bool>& classes_included);

// One hierarchical evaluation class: the union of member input classes.
struct HecClass {
  std::string name;
  std::vector<std::size_t> members;
};

struct ComposedVolumes {
  LabelVolume labels;
  ProbabilityVolume probs;
};

// Composite probability is the clamped sum of member probabilities; the
// composite label is the logical OR of member labels. Output volumes are
// multi-label. Throws std::invalid_argument on an unknown member class.
ComposedVolumes compose_hierarchical_classes(const LabelVolume& labels,
                                             const ProbabilityVolume& probs,
                                             std::span<const HecClass> hec);

}  // namespace segcal

#endif  // SEGCAL_RELIABILITY_HPP_
