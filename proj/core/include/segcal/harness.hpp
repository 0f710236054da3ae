#ifndef SEGCAL_HARNESS_HPP_
#define SEGCAL_HARNESS_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "segcal/loss.hpp"
#include "segcal/reliability.hpp"
#include "segcal/viz.hpp"
#include "segcal/volume.hpp"
#include "segcal/volume_io.hpp"

namespace segcal::harness {

// Synthetic 2D segmentation data: disc-shaped blobs per foreground class on a
// background and a noisy intensity image. Annotation noise lives in a band
// around the clean boundaries: a band pixel is relabelled with probability
// `label_noise` to a uniformly chosen other class from its neighbourhood, so
// the Bayes-optimal confidence there is at most 1 - label_noise.
struct SyntheticConfig {
  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t num_classes = 3;
  int min_blobs = 1;
  int max_blobs = 2;
  double min_radius = 12.0;
  double max_radius = 24.0;
  double label_noise = 0.2;
  // Pixels within this Chebyshev distance of a clean boundary pixel are noisy.
  int noise_band = 3;
  double intensity_noise = 0.7;
  // Fraction of images from which one random foreground class is removed.
  double missing_class_fraction = 0.0;
  std::size_t num_train = 8;
  std::size_t num_val = 8;
  std::size_t num_test = 8;
  std::uint64_t seed = 0;
};

struct SyntheticImage {
  std::string id;
  ChannelVolume image;       // (1, H, W) intensity
  LabelVolume clean_labels;  // generator truth before label noise
  LabelVolume labels;        // annotated (noisy) labels
};

struct SyntheticDataset {
  SyntheticConfig config;
  std::vector<SyntheticImage> train;
  std::vector<SyntheticImage> val;
  std::vector<SyntheticImage> test;
};

// Deterministic in `cfg` (including the seed). Throws std::invalid_argument
// for zero-size images, fewer than 2 classes or an invalid noise rate.
SyntheticDataset generate_dataset(const SyntheticConfig& cfg);

// Classes an annotator may substitute at `pixel`: the other clean classes
// within noise_band + 1 of it, empty outside the noise band.
std::vector<std::size_t> noise_candidates(const SyntheticConfig& cfg, const LabelVolume& clean_labels,
                                          std::size_t pixel);

// P(annotated label = c | clean labels) at `pixel`, one entry per class.
std::vector<double> bayes_posterior(const SyntheticConfig& cfg, const LabelVolume& clean_labels,
                                    std::size_t pixel);

// Pixels whose clean label differs from at least one 4-neighbour.
std::vector<bool> boundary_mask(const LabelVolume& clean_labels);

// Per-pixel features over a fixed neighbourhood: intensity, 3x3 mean, 3x3
// standard deviation and 5x5 mean. No pixel coordinates: with few training
// images the network memorizes blob positions through them.
inline constexpr std::size_t kNumFeatures = 4;
ChannelVolume pixel_features(const ChannelVolume& image);

// Two-layer pixelwise network: tanh hidden layer, linear logits.
class ToyModel {
 public:
  ToyModel() = default;
  ToyModel(std::size_t num_classes, std::size_t hidden, std::uint64_t seed);

  std::size_t num_classes() const { return num_classes_; }
  std::size_t hidden() const { return hidden_; }

  // Input standardization fitted on training features.
  void set_normalization(std::vector<double> mean, std::vector<double> scale);

  // Intermediates of one forward pass, reusable by backward().
  struct Trace {
    std::size_t num_voxels = 0;
    std::vector<double> inputs;  // standardized features (F, N)
    std::vector<double> hidden;  // tanh activations (hidden, N)
  };

  ChannelVolume logits(const ChannelVolume& features) const;
  ChannelVolume logits(const ChannelVolume& features, Trace& trace) const;

  // Accumulates dL/dtheta for upstream dL/dlogits into `grad` (same layout
  // as parameters()).
  void backward(const ChannelVolume& features, const ChannelVolume& grad_logits,
                std::vector<double>& grad) const;
  void backward(const Trace& trace, const ChannelVolume& grad_logits, std::vector<double>& grad) const;

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }

  friend bool operator==(const ToyModel&, const ToyModel&) = default;

 private:
  void forward_hidden(const ChannelVolume& features, Trace& trace) const;

  std::size_t num_classes_ = 0;
  std::size_t hidden_ = 0;
  std::vector<double> feature_mean_;
  std::vector<double> feature_scale_;
  // [W1 (hidden x F) | b1 (hidden) | W2 (C x hidden) | b2 (C)]
  std::vector<double> params_;
};

enum class LossVariant { kDiceCe, kCeOnly, kDiceCeHardAce, kDiceCeSoftAce };

std::string_view to_string(LossVariant variant);
LossVariant parse_variant(std::string_view name);

struct TrainConfig {
  LossVariant variant = LossVariant::kDiceCe;
  double lambda = 1.0;
  int num_bins = BinningConfig::kDefaultBins;  // ACE loss bins
  int epochs = 300;
  double learning_rate = 1.0;
  bool cosine_decay = true;
  double max_grad_norm = 2.0;  // rescales the step when exceeded; 0 disables
  int eval_every = 10;
  std::size_t hidden = 16;
  std::uint64_t seed = 0;
  ClassSelection classes{};
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dsc = -1.0;  // only on validation epochs
  double grad_norm = 0.0;  // before clipping
};

struct Evaluation {
  CalibrationReport macro;
  CalibrationReport micro;
  double dsc = 0.0;
  double boundary_confidence = 0.0;  // mean max-probability on boundary pixels
  std::vector<ReliabilityCurve> per_image_curves;
};

struct TrainResult {
  ToyModel model;
  int best_epoch = 0;
  double best_val_dsc = 0.0;
  std::vector<EpochRecord> history;
  Evaluation test;
};

// Full-batch gradient descent over the training split, loss gradients
// chained through softmax into the model. Keeps the weights with the best
// validation DSC (later epochs win ties) and evaluates them on the test
// split with 20-bin hard-binned metrics. Throws std::runtime_error if the
// loss becomes non-finite.
TrainResult train(const SyntheticDataset& data, const TrainConfig& cfg);

ProbabilityVolume predict(const ToyModel& model, const SyntheticImage& image);
ChannelVolume predict_logits(const ToyModel& model, const SyntheticImage& image);

Evaluation evaluate(const ToyModel& model, std::span<const SyntheticImage> images,
                    const BinningConfig& metric_binning, const ClassSelection& classes);

// Writes image, label, prediction and logits volumes for one split and a
// manifest referencing them; returns the manifest path.
std::filesystem::path write_split(const ToyModel& model, std::span<const SyntheticImage> images,
                                  const SyntheticConfig& cfg, const std::string& split,
                                  const std::filesystem::path& dir);

enum class SweepDimension { kBins, kLambda };
std::string_view to_string(SweepDimension dimension);

struct SweepCell {
  LossVariant variant = LossVariant::kDiceCe;
  SweepDimension dimension = SweepDimension::kBins;
  double value = 0.0;
  std::uint64_t seed = 0;
  double dsc = 0.0;
  double macro_ace = 0.0;
  double micro_ace = 0.0;
  double macro_ece = 0.0;
  double macro_mce = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> cells;

  // Mean of a field over seeds for one (variant, value).
  double mean(LossVariant variant, double value, double SweepCell::*field) const;
};

// One training run per (value, seed): the dataset is regenerated from
// `data_cfg` with the seed and the model initialized from the same seed.
// Runs execute on up to `jobs` threads; results are ordered by (value, seed).
SweepResult sweep(const SyntheticConfig& data_cfg, const TrainConfig& base, SweepDimension dimension,
                  std::span<const double> values, std::span<const std::uint64_t> seeds,
                  std::size_t jobs = 1);

// variant,dimension,value,seed,dsc,macro_ace,micro_ace,macro_ece,macro_mce
std::string sweep_csv(const SweepResult& result);

// DSC and macro-ACE against the swept value, one series per variant.
LinePlot sweep_plot(const SweepResult& result, bool dsc_panel);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace segcal::harness

#endif  // SEGCAL_HARNESS_HPP_
