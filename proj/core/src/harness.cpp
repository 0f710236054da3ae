#include "segcal/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "segcal/temperature.hpp"

namespace segcal::harness {
namespace {

std::mt19937_64 image_rng(std::uint64_t seed, std::uint64_t split, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

std::vector<std::size_t> candidates_at(const SyntheticConfig& cfg,
                                       std::span<const std::uint16_t> clean,
                                       const std::vector<bool>& boundary, std::size_t h,
                                       std::size_t w, std::size_t pixel) {
  const long y = static_cast<long>(pixel / w);
  const long x = static_cast<long>(pixel % w);
  const long band = cfg.noise_band;
  bool near = false;
  for (long yy = std::max(0L, y - band); yy <= std::min<long>(h - 1, y + band) && !near; ++yy) {
    for (long xx = std::max(0L, x - band); xx <= std::min<long>(w - 1, x + band); ++xx) {
      if (boundary[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)]) {
        near = true;
        break;
      }
    }
  }
  std::vector<std::size_t> out;
  if (!near) return out;
  std::vector<bool> seen(cfg.num_classes, false);
  const long reach = band + 1;
  for (long yy = std::max(0L, y - reach); yy <= std::min<long>(h - 1, y + reach); ++yy) {
    for (long xx = std::max(0L, x - reach); xx <= std::min<long>(w - 1, x + reach); ++xx) {
      seen[clean[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)]] = true;
    }
  }
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    if (seen[c] && c != clean[pixel]) out.push_back(c);
  }
  return out;
}

SyntheticImage make_image(const SyntheticConfig& cfg, std::mt19937_64& rng, std::string id) {
  const std::size_t h = cfg.height;
  const std::size_t w = cfg.width;
  const std::size_t n = h * w;
  const auto num_fg = static_cast<int>(cfg.num_classes) - 1;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> blob_count(cfg.min_blobs, cfg.max_blobs);

  int missing = -1;
  if (cfg.missing_class_fraction > 0.0 && unit(rng) < cfg.missing_class_fraction) {
    missing = 1 + std::uniform_int_distribution<int>(0, num_fg - 1)(rng);
  }

  std::vector<std::uint16_t> clean(n, 0);
  for (int attempt = 0; attempt < 50; ++attempt) {
    std::fill(clean.begin(), clean.end(), 0);
    for (int k = 1; k <= num_fg; ++k) {
      const int blobs = blob_count(rng);
      for (int b = 0; b < blobs; ++b) {
        const double radius = cfg.min_radius + (cfg.max_radius - cfg.min_radius) * unit(rng);
        const double cy = radius + (static_cast<double>(h) - 2 * radius) * unit(rng);
        const double cx = radius + (static_cast<double>(w) - 2 * radius) * unit(rng);
        if (k == missing) continue;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - cy;
            const double dx = static_cast<double>(x) + 0.5 - cx;
            if (dy * dy + dx * dx <= radius * radius) clean[y * w + x] = static_cast<std::uint16_t>(k);
          }
        }
      }
    }
    bool complete = true;
    for (int k = 1; k <= num_fg; ++k) {
      if (k == missing) continue;
      if (std::count(clean.begin(), clean.end(), static_cast<std::uint16_t>(k)) < 8) complete = false;
    }
    if (complete) break;
  }

  const std::vector<std::size_t> dims = {h, w};
  LabelVolume clean_volume = LabelVolume::from_indices(cfg.num_classes, dims, clean);
  const std::vector<bool> boundary = boundary_mask(clean_volume);

  std::normal_distribution<double> noise(0.0, cfg.intensity_noise);
  std::vector<double> intensity(n);
  std::vector<std::uint16_t> noisy(clean);
  for (std::size_t i = 0; i < n; ++i) {
    intensity[i] = static_cast<double>(clean[i]) + noise(rng);
    const std::vector<std::size_t> candidates = candidates_at(cfg, clean, boundary, h, w, i);
    if (!candidates.empty() && unit(rng) < cfg.label_noise) {
      std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
      noisy[i] = static_cast<std::uint16_t>(candidates[pick(rng)]);
    }
  }

  return SyntheticImage{std::move(id), ChannelVolume(1, dims, std::move(intensity)),
                        std::move(clean_volume),
                        LabelVolume::from_indices(cfg.num_classes, dims, std::move(noisy))};
}

double box_mean(const ChannelVolume& image, std::size_t y, std::size_t x, int radius,
                double* second_moment) {
  const auto h = static_cast<long>(image.spatial_dims()[0]);
  const auto w = static_cast<long>(image.spatial_dims()[1]);
  double sum = 0.0, sq = 0.0;
  int count = 0;
  for (long dy = -radius; dy <= radius; ++dy) {
    for (long dx = -radius; dx <= radius; ++dx) {
      const long yy = std::clamp(static_cast<long>(y) + dy, 0L, h - 1);
      const long xx = std::clamp(static_cast<long>(x) + dx, 0L, w - 1);
      const double v = image.at(0, static_cast<std::size_t>(yy * w + xx));
      sum += v;
      sq += v * v;
      ++count;
    }
  }
  if (second_moment) *second_moment = sq / count;
  return sum / count;
}

double dataset_dsc(const ToyModel& model, std::span<const SyntheticImage> images,
                   const std::vector<ChannelVolume>& features, const ClassSelection& classes) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < images.size(); ++k) {
    const ProbabilityVolume probs = softmax(model.logits(features[k]));
    std::vector<std::uint64_t> fg(images[k].labels.num_classes());
    for (std::size_t c = 0; c < fg.size(); ++c) fg[c] = images[k].labels.foreground_count(c);
    const DiceScores d = hard_dice(probs, images[k].labels, select_classes(fg, classes));
    if (!d.defined) continue;
    sum += d.mean;
    ++count;
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> out(v.size());
  std::size_t k = 0;
  while (k < order.size()) {
    std::size_t j = k;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[k]]) ++j;
    const double rank = 0.5 * static_cast<double>(k + j) + 1.0;
    for (std::size_t t = k; t <= j; ++t) out[order[t]] = rank;
    k = j + 1;
  }
  return out;
}

}  // namespace

SyntheticDataset generate_dataset(const SyntheticConfig& cfg) {
  if (cfg.height == 0 || cfg.width == 0) throw std::invalid_argument("synthetic images need nonzero size");
  if (cfg.num_classes < 2) throw std::invalid_argument("synthetic data needs at least 2 classes");
  if (!(cfg.label_noise >= 0.0 && cfg.label_noise < 1.0) || cfg.noise_band < 0) {
    throw std::invalid_argument("label noise must lie in [0, 1) with a nonnegative band");
  }
  if (cfg.min_blobs < 1 || cfg.max_blobs < cfg.min_blobs || cfg.min_radius <= 0.0 ||
      cfg.max_radius < cfg.min_radius ||
      2 * cfg.max_radius >= static_cast<double>(std::min(cfg.height, cfg.width))) {
    throw std::invalid_argument("blob configuration does not fit the image");
  }
  SyntheticDataset data;
  data.config = cfg;
  const std::pair<std::vector<SyntheticImage>*, std::size_t> splits[] = {
      {&data.train, cfg.num_train}, {&data.val, cfg.num_val}, {&data.test, cfg.num_test}};
  const char* const names[] = {"train", "val", "test"};
  for (std::uint64_t s = 0; s < 3; ++s) {
    for (std::size_t k = 0; k < splits[s].second; ++k) {
      auto rng = image_rng(cfg.seed, s, k);
      char id[32];
      std::snprintf(id, sizeof(id), "%s_%03zu", names[s], k);
      splits[s].first->push_back(make_image(cfg, rng, id));
    }
  }
  return data;
}

std::vector<std::size_t> noise_candidates(const SyntheticConfig& cfg, const LabelVolume& clean_labels,
                                          std::size_t pixel) {
  if (clean_labels.spatial_dims().size() != 2 || pixel >= clean_labels.num_voxels()) {
    throw std::invalid_argument("noise candidates need a 2D label volume and a valid pixel");
  }
  const auto idx = clean_labels.indices();
  return candidates_at(cfg, idx, boundary_mask(clean_labels), clean_labels.spatial_dims()[0],
                       clean_labels.spatial_dims()[1], pixel);
}

std::vector<double> bayes_posterior(const SyntheticConfig& cfg, const LabelVolume& clean_labels,
                                    std::size_t pixel) {
  const std::vector<std::size_t> candidates = noise_candidates(cfg, clean_labels, pixel);
  std::vector<double> out(cfg.num_classes, 0.0);
  const std::size_t own = clean_labels.indices()[pixel];
  if (candidates.empty()) {
    out[own] = 1.0;
    return out;
  }
  out[own] = 1.0 - cfg.label_noise;
  for (std::size_t c : candidates) out[c] = cfg.label_noise / static_cast<double>(candidates.size());
  return out;
}

std::vector<bool> boundary_mask(const LabelVolume& clean_labels) {
  const std::size_t h = clean_labels.spatial_dims()[0];
  const std::size_t w = clean_labels.spatial_dims()[1];
  const auto idx = clean_labels.indices();
  std::vector<bool> out(h * w, false);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto v = idx[y * w + x];
      const bool differs = (y > 0 && idx[(y - 1) * w + x] != v) ||
                           (y + 1 < h && idx[(y + 1) * w + x] != v) ||
                           (x > 0 && idx[y * w + x - 1] != v) ||
                           (x + 1 < w && idx[y * w + x + 1] != v);
      out[y * w + x] = differs;
    }
  }
  return out;
}

ChannelVolume pixel_features(const ChannelVolume& image) {
  if (image.num_classes() != 1 || image.spatial_dims().size() != 2) {
    throw std::invalid_argument("pixel features expect a single-channel 2D image");
  }
  const std::size_t h = image.spatial_dims()[0];
  const std::size_t w = image.spatial_dims()[1];
  ChannelVolume out(kNumFeatures, image.spatial_dims());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      double m2 = 0.0;
      const double mean3 = box_mean(image, y, x, 1, &m2);
      out.at(0, i) = image.at(0, i);
      out.at(1, i) = mean3;
      out.at(2, i) = std::sqrt(std::max(0.0, m2 - mean3 * mean3));
      out.at(3, i) = box_mean(image, y, x, 2, nullptr);
    }
  }
  return out;
}

ToyModel::ToyModel(std::size_t num_classes, std::size_t hidden, std::uint64_t seed)
    : num_classes_(num_classes),
      hidden_(hidden),
      feature_mean_(kNumFeatures, 0.0),
      feature_scale_(kNumFeatures, 1.0),
      params_(hidden * kNumFeatures + hidden + num_classes * hidden + num_classes, 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> w1(0.0, 1.0 / std::sqrt(static_cast<double>(kNumFeatures)));
  std::normal_distribution<double> w2(0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
  for (std::size_t k = 0; k < hidden * kNumFeatures; ++k) params_[k] = w1(rng);
  const std::size_t w2_offset = hidden * kNumFeatures + hidden;
  for (std::size_t k = 0; k < num_classes * hidden; ++k) params_[w2_offset + k] = w2(rng);
}

void ToyModel::set_normalization(std::vector<double> mean, std::vector<double> scale) {
  if (mean.size() != kNumFeatures || scale.size() != kNumFeatures) {
    throw std::invalid_argument("normalization needs one mean and scale per feature");
  }
  feature_mean_ = std::move(mean);
  feature_scale_ = std::move(scale);
}

void ToyModel::forward_hidden(const ChannelVolume& features, Trace& trace) const {
  if (features.num_classes() != kNumFeatures) {
    throw std::invalid_argument("toy model expects " + std::to_string(kNumFeatures) + " feature channels");
  }
  const std::size_t n = features.num_voxels();
  trace.num_voxels = n;
  std::vector<double>& inputs = trace.inputs;
  std::vector<double>& act = trace.hidden;
  inputs.resize(kNumFeatures * n);
  for (std::size_t k = 0; k < kNumFeatures; ++k) {
    const auto f = features.channel(k);
    const double inv = 1.0 / feature_scale_[k];
    for (std::size_t i = 0; i < n; ++i) inputs[k * n + i] = (f[i] - feature_mean_[k]) * inv;
  }
  act.assign(hidden_ * n, 0.0);
  const double* w1 = params_.data();
  const double* b1 = w1 + hidden_ * kNumFeatures;
  for (std::size_t j = 0; j < hidden_; ++j) {
    double* a = act.data() + j * n;
    std::fill(a, a + n, b1[j]);
    for (std::size_t k = 0; k < kNumFeatures; ++k) {
      const double wjk = w1[j * kNumFeatures + k];
      const double* f = inputs.data() + k * n;
      for (std::size_t i = 0; i < n; ++i) a[i] += wjk * f[i];
    }
    for (std::size_t i = 0; i < n; ++i) a[i] = std::tanh(a[i]);
  }
}

ChannelVolume ToyModel::logits(const ChannelVolume& features) const {
  Trace trace;
  return logits(features, trace);
}

ChannelVolume ToyModel::logits(const ChannelVolume& features, Trace& trace) const {
  forward_hidden(features, trace);
  const std::size_t n = trace.num_voxels;
  const std::vector<double>& act = trace.hidden;
  const double* w2 = params_.data() + hidden_ * kNumFeatures + hidden_;
  const double* b2 = w2 + num_classes_ * hidden_;
  ChannelVolume out(num_classes_, features.spatial_dims());
  for (std::size_t c = 0; c < num_classes_; ++c) {
    auto z = out.channel(c);
    std::fill(z.begin(), z.end(), b2[c]);
    for (std::size_t j = 0; j < hidden_; ++j) {
      const double wcj = w2[c * hidden_ + j];
      const double* a = act.data() + j * n;
      for (std::size_t i = 0; i < n; ++i) z[i] += wcj * a[i];
    }
  }
  return out;
}

void ToyModel::backward(const ChannelVolume& features, const ChannelVolume& grad_logits,
                        std::vector<double>& grad) const {
  Trace trace;
  forward_hidden(features, trace);
  backward(trace, grad_logits, grad);
}

void ToyModel::backward(const Trace& trace, const ChannelVolume& grad_logits,
                        std::vector<double>& grad) const {
  const std::size_t n = trace.num_voxels;
  if (grad_logits.num_classes() != num_classes_ || grad_logits.num_voxels() != n) {
    throw std::invalid_argument("logit gradient does not match the traced forward pass");
  }
  if (grad.size() != params_.size()) grad.assign(params_.size(), 0.0);
  const std::vector<double>& inputs = trace.inputs;
  const std::vector<double>& act = trace.hidden;
  const std::size_t b1_offset = hidden_ * kNumFeatures;
  const std::size_t w2_offset = b1_offset + hidden_;
  const std::size_t b2_offset = w2_offset + num_classes_ * hidden_;
  const double* w2 = params_.data() + w2_offset;

  std::vector<double> grad_act(hidden_ * n, 0.0);
  for (std::size_t c = 0; c < num_classes_; ++c) {
    const auto gz = grad_logits.channel(c);
    double bias = 0.0;
    for (std::size_t i = 0; i < n; ++i) bias += gz[i];
    grad[b2_offset + c] += bias;
    for (std::size_t j = 0; j < hidden_; ++j) {
      const double* a = act.data() + j * n;
      double* ga = grad_act.data() + j * n;
      const double wcj = w2[c * hidden_ + j];
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += gz[i] * a[i];
        ga[i] += wcj * gz[i];
      }
      grad[w2_offset + c * hidden_ + j] += acc;
    }
  }
  for (std::size_t j = 0; j < hidden_; ++j) {
    const double* a = act.data() + j * n;
    double* ga = grad_act.data() + j * n;
    double bias = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      ga[i] *= 1.0 - a[i] * a[i];
      bias += ga[i];
    }
    grad[b1_offset + j] += bias;
    for (std::size_t k = 0; k < kNumFeatures; ++k) {
      const double* f = inputs.data() + k * n;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += ga[i] * f[i];
      grad[j * kNumFeatures + k] += acc;
    }
  }
}

std::string_view to_string(LossVariant variant) {
  switch (variant) {
    case LossVariant::kDiceCe: return "dsc_ce";
    case LossVariant::kCeOnly: return "ce_only";
    case LossVariant::kDiceCeHardAce: return "dsc_ce_hl1ace";
    case LossVariant::kDiceCeSoftAce: return "dsc_ce_sl1ace";
  }
  return "?";
}

LossVariant parse_variant(std::string_view name) {
  for (LossVariant v : {LossVariant::kDiceCe, LossVariant::kCeOnly, LossVariant::kDiceCeHardAce,
                        LossVariant::kDiceCeSoftAce}) {
    if (name == to_string(v)) return v;
  }
  throw std::invalid_argument("unknown loss variant '" + std::string(name) +
                              "' (expected dsc_ce|ce_only|dsc_ce_hl1ace|dsc_ce_sl1ace)");
}

ProbabilityVolume predict(const ToyModel& model, const SyntheticImage& image) {
  return softmax(model.logits(pixel_features(image.image)));
}

ChannelVolume predict_logits(const ToyModel& model, const SyntheticImage& image) {
  return model.logits(pixel_features(image.image));
}

Evaluation evaluate(const ToyModel& model, std::span<const SyntheticImage> images,
                    const BinningConfig& metric_binning, const ClassSelection& classes) {
  if (images.empty()) throw std::invalid_argument("evaluation needs at least one image");
  Evaluation out;
  std::vector<CalibrationReport> reports;
  ReliabilityTally dataset(model.num_classes(), metric_binning);
  double boundary_sum = 0.0;
  std::size_t boundary_count = 0;
  for (const SyntheticImage& image : images) {
    const ProbabilityVolume probs = predict(model, image);
    const ReliabilityTally tally = tally_image(probs, image.labels, metric_binning);
    dataset.merge_from(tally);
    ReliabilityCurve curve = finalize(tally);
    const std::vector<bool> mask = select_classes(curve.foreground_voxels, classes);
    CalibrationReport report = calibration_metrics(curve, mask);
    const DiceScores dice = hard_dice(probs, image.labels, mask);
    if (dice.defined) report.dsc = dice.mean;
    reports.push_back(std::move(report));
    out.per_image_curves.push_back(std::move(curve));

    const std::vector<bool> boundary = boundary_mask(image.clean_labels);
    for (std::size_t i = 0; i < probs.num_voxels(); ++i) {
      if (!boundary[i]) continue;
      double peak = 0.0;
      for (std::size_t c = 0; c < probs.num_classes(); ++c) peak = std::max(peak, probs.at(c, i));
      boundary_sum += peak;
      ++boundary_count;
    }
  }
  out.macro = macro_report(reports);
  out.micro = micro_report(dataset, classes);
  out.dsc = out.macro.dsc.value_or(0.0);
  out.boundary_confidence =
      boundary_count > 0 ? boundary_sum / static_cast<double>(boundary_count) : 0.0;
  return out;
}

TrainResult train(const SyntheticDataset& data, const TrainConfig& cfg) {
  if (data.train.empty() || data.val.empty() || data.test.empty()) {
    throw std::invalid_argument("training needs nonempty train, val and test splits");
  }
  if (cfg.epochs < 1 || !(cfg.learning_rate > 0.0) || cfg.eval_every < 1) {
    throw std::invalid_argument("training needs epochs >= 1, eval_every >= 1 and a positive step");
  }
  const std::size_t num_classes = data.config.num_classes;

  std::vector<ChannelVolume> train_features, val_features;
  for (const auto& im : data.train) train_features.push_back(pixel_features(im.image));
  for (const auto& im : data.val) val_features.push_back(pixel_features(im.image));

  std::vector<double> mean(kNumFeatures, 0.0), scale(kNumFeatures, 0.0);
  std::size_t total = 0;
  for (const auto& f : train_features) {
    for (std::size_t k = 0; k < kNumFeatures; ++k) {
      for (double v : f.channel(k)) mean[k] += v;
    }
    total += f.num_voxels();
  }
  for (auto& m : mean) m /= static_cast<double>(total);
  for (const auto& f : train_features) {
    for (std::size_t k = 0; k < kNumFeatures; ++k) {
      for (double v : f.channel(k)) scale[k] += (v - mean[k]) * (v - mean[k]);
    }
  }
  for (auto& s : scale) s = std::max(1e-12, std::sqrt(s / static_cast<double>(total)));

  TrainResult result;
  ToyModel model(num_classes, cfg.hidden, cfg.seed);
  model.set_normalization(mean, scale);

  LossConfig loss_cfg;
  loss_cfg.classes = cfg.classes;
  loss_cfg.binning = BinningConfig(
      cfg.num_bins, cfg.variant == LossVariant::kDiceCeHardAce ? Kernel::kHard : Kernel::kSoft);
  const bool with_ace =
      cfg.variant == LossVariant::kDiceCeHardAce || cfg.variant == LossVariant::kDiceCeSoftAce;

  ToyModel best = model;
  double best_dsc = -1.0;
  std::vector<double> grad(model.parameters().size(), 0.0);
  const double inv_images = 1.0 / static_cast<double>(data.train.size());
  ToyModel::Trace trace;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss_sum = 0.0;
    for (std::size_t k = 0; k < data.train.size(); ++k) {
      const ChannelVolume logits = model.logits(train_features[k], trace);
      if (!std::all_of(logits.values().begin(), logits.values().end(),
                       [](double v) { return std::isfinite(v); })) {
        throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) +
                                 " on image " + data.train[k].id + ": non-finite logits");
      }
      const ProbabilityVolume probs = softmax(logits);
      const LabelVolume& labels = data.train[k].labels;
      double value = 0.0;
      ChannelVolume grad_probs;
      if (cfg.variant == LossVariant::kCeOnly) {
        DiceCeOutput out = cross_entropy_loss(probs, labels);
        value = out.value;
        grad_probs = std::move(out.grad_probs);
      } else if (with_ace) {
        CompositeOutput out = composite_loss(probs, labels, cfg.lambda, loss_cfg);
        value = out.value;
        grad_probs = std::move(out.grad_probs);
      } else {
        DiceCeOutput out = dice_ce_loss(probs, labels, cfg.classes);
        value = out.value;
        grad_probs = std::move(out.grad_probs);
      }
      if (!std::isfinite(value)) {
        throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) +
                                 " on image " + data.train[k].id);
      }
      loss_sum += value;
      ChannelVolume grad_logits = loss_grad_logits(grad_probs, probs);
      for (double& g : grad_logits.values()) g *= inv_images;
      model.backward(trace, grad_logits, grad);
    }

    double step = cfg.learning_rate;
    if (cfg.cosine_decay) {
      step *= 0.5 * (1.0 + std::cos(std::numbers::pi * (epoch - 1) / cfg.epochs));
    }
    double norm = 0.0;
    for (double g : grad) norm += g * g;
    norm = std::sqrt(norm);
    if (cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm) step *= cfg.max_grad_norm / norm;
    auto params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) params[k] -= step * grad[k];
    if (!std::all_of(params.begin(), params.end(), [](double v) { return std::isfinite(v); })) {
      throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) +
                               ": non-finite weights");
    }

    EpochRecord record{epoch, loss_sum * inv_images, -1.0, norm};
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      record.val_dsc = dataset_dsc(model, data.val, val_features, cfg.classes);
      if (record.val_dsc >= best_dsc) {
        best_dsc = record.val_dsc;
        best = model;
        result.best_epoch = epoch;
      }
    }
    result.history.push_back(record);
  }

  result.model = best;
  result.best_val_dsc = best_dsc;
  result.test = evaluate(best, data.test, BinningConfig(BinningConfig::kDefaultBins, Kernel::kHard),
                         cfg.classes);
  return result;
}

std::filesystem::path write_split(const ToyModel& model, std::span<const SyntheticImage> images,
                                  const SyntheticConfig& cfg, const std::string& split,
                                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / split);
  DatasetManifest manifest;
  manifest.split = split;
  manifest.classes.push_back("background");
  for (std::size_t c = 1; c < cfg.num_classes; ++c) manifest.classes.push_back("class" + std::to_string(c));
  if (cfg.num_classes > 2) {
    HecClass all{"foreground", {}};
    for (std::size_t c = 1; c < cfg.num_classes; ++c) all.members.push_back(c);
    manifest.hec.push_back(std::move(all));
  }
  for (const SyntheticImage& image : images) {
    const std::filesystem::path base = std::filesystem::absolute(dir / split / image.id);
    ManifestCase mc;
    mc.id = image.id;
    mc.image = base.string() + "_image.calv";
    mc.label = base.string() + "_label.calv";
    mc.prediction = base.string() + "_prob.calv";
    mc.logits = base.string() + "_logits.calv";
    const ChannelVolume logits = predict_logits(model, image);
    save_logits(*mc.image, image.image);
    save_labels(mc.label, image.labels);
    save_logits(*mc.logits, logits);
    save_probabilities(mc.prediction, softmax(logits));
    manifest.cases.push_back(std::move(mc));
  }
  const std::filesystem::path path = dir / (split + "_manifest.json");
  save_manifest(path, manifest);
  return path;
}

std::string_view to_string(SweepDimension dimension) {
  return dimension == SweepDimension::kBins ? "bins" : "lambda";
}

double SweepResult::mean(LossVariant variant, double value, double SweepCell::*field) const {
  double sum = 0.0;
  std::size_t count = 0;
  for (const SweepCell& cell : cells) {
    if (cell.variant != variant || cell.value != value) continue;
    sum += cell.*field;
    ++count;
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

SweepResult sweep(const SyntheticConfig& data_cfg, const TrainConfig& base, SweepDimension dimension,
                  std::span<const double> values, std::span<const std::uint64_t> seeds,
                  std::size_t jobs) {
  if (values.empty() || seeds.empty()) throw std::invalid_argument("sweep needs values and seeds");
  SweepResult result;
  result.cells.resize(values.size() * seeds.size());
  std::vector<std::exception_ptr> errors(result.cells.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    for (std::size_t k = next++; k < result.cells.size(); k = next++) {
      try {
        const double value = values[k / seeds.size()];
        const std::uint64_t seed = seeds[k % seeds.size()];
        SyntheticConfig dc = data_cfg;
        dc.seed = seed;
        TrainConfig tc = base;
        tc.seed = seed;
        if (dimension == SweepDimension::kBins) {
          tc.num_bins = static_cast<int>(value);
        } else {
          tc.lambda = value;
        }
        const TrainResult run = train(generate_dataset(dc), tc);
        SweepCell& cell = result.cells[k];
        cell.variant = base.variant;
        cell.dimension = dimension;
        cell.value = value;
        cell.seed = seed;
        cell.dsc = run.test.dsc;
        cell.macro_ace = run.test.macro.mean.ace;
        cell.micro_ace = run.test.micro.mean.ace;
        cell.macro_ece = run.test.macro.mean.ece;
        cell.macro_mce = run.test.macro.mean.mce;
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, result.cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return result;
}

std::string sweep_csv(const SweepResult& result) {
  std::ostringstream out;
  out << "variant,dimension,value,seed,dsc,macro_ace,micro_ace,macro_ece,macro_mce\n";
  char buf[256];
  for (const SweepCell& c : result.cells) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%g,%llu,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                  std::string(to_string(c.variant)).c_str(),
                  std::string(to_string(c.dimension)).c_str(), c.value,
                  static_cast<unsigned long long>(c.seed), c.dsc, c.macro_ace, c.micro_ace,
                  c.macro_ece, c.macro_mce);
    out << buf;
  }
  return out.str();
}

LinePlot sweep_plot(const SweepResult& result, bool dsc_panel) {
  LinePlot plot;
  if (result.cells.empty()) return plot;
  const SweepDimension dim = result.cells.front().dimension;
  plot.log_x = true;
  plot.x_label = dim == SweepDimension::kBins ? "number of bins M" : "ACE loss weight";
  plot.y_label = dsc_panel ? "DSC" : "macro-ACE";
  plot.title = std::string(dsc_panel ? "DSC" : "macro-ACE") + " vs " + std::string(to_string(dim));
  std::vector<LossVariant> variants;
  for (const SweepCell& c : result.cells) {
    if (std::find(variants.begin(), variants.end(), c.variant) == variants.end()) {
      variants.push_back(c.variant);
    }
  }
  for (LossVariant v : variants) {
    PlotSeries s;
    s.name = std::string(to_string(v));
    for (const SweepCell& c : result.cells) {
      if (c.variant != v || std::find(s.x.begin(), s.x.end(), c.value) != s.x.end()) continue;
      s.x.push_back(c.value);
    }
    std::sort(s.x.begin(), s.x.end());
    for (double x : s.x) {
      s.y.push_back(result.mean(v, x, dsc_panel ? &SweepCell::dsc : &SweepCell::macro_ace));
    }
    plot.series.push_back(std::move(s));
  }
  return plot;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("spearman needs two equal-length samples of size >= 2");
  }
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ma += ra[k];
    mb += rb[k];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += (ra[k] - ma) * (rb[k] - mb);
    saa += (ra[k] - ma) * (ra[k] - ma);
    sbb += (rb[k] - mb) * (rb[k] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace segcal::harness
