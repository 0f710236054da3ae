#include "segcal/temperature.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace segcal {
namespace {

void check_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("temperature must be positive and finite, got " +
                                std::to_string(temperature));
  }
}

struct CrossEntropyEval {
  double sum = 0.0;        // summed over voxels
  double grad_log_t = 0.0;  // d(sum)/d(log T)
  std::size_t voxels = 0;
};

// Softmax of logits/T per voxel with the max subtracted for stability.
CrossEntropyEval evaluate(const LabeledLogits& data, double temperature) {
  const ChannelVolume& z = data.logits;
  if (z.num_classes() != data.labels.num_classes() ||
      z.spatial_dims() != data.labels.spatial_dims()) {
    throw std::invalid_argument("logits and labels differ in shape");
  }
  const std::size_t num_classes = z.num_classes();
  const std::size_t n = z.num_voxels();
  CrossEntropyEval out;
  out.voxels = n;
  std::vector<double> scaled(num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    double peak = -INFINITY;
    for (std::size_t c = 0; c < num_classes; ++c) {
      scaled[c] = z.at(c, i) / temperature;
      peak = std::max(peak, scaled[c]);
    }
    double norm = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) norm += std::exp(scaled[c] - peak);
    const double log_norm = peak + std::log(norm);
    double label_mass = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      const double y = data.labels.indicator(c, i);
      label_mass += y;
      out.sum -= y * (scaled[c] - log_norm);
    }
    // dCE/ds_k = label_mass * p_k - y_k and ds_k/dlogT = -s_k.
    for (std::size_t c = 0; c < num_classes; ++c) {
      const double p = std::exp(scaled[c] - log_norm);
      const double y = data.labels.indicator(c, i);
      out.grad_log_t -= (label_mass * p - y) * scaled[c];
    }
  }
  return out;
}

double stream_cross_entropy(const LogitStream& stream, double temperature) {
  double sum = 0.0;
  std::size_t voxels = 0;
  for (std::size_t k = 0; k < stream.size; ++k) {
    const CrossEntropyEval e = evaluate(stream.load(k), temperature);
    sum += e.sum;
    voxels += e.voxels;
  }
  return voxels > 0 ? sum / static_cast<double>(voxels) : 0.0;
}

}  // namespace

ProbabilityVolume softmax(const ChannelVolume& logits) {
  const std::size_t num_classes = logits.num_classes();
  const std::size_t n = logits.num_voxels();
  ChannelVolume out(num_classes, logits.spatial_dims());
  for (std::size_t i = 0; i < n; ++i) {
    double peak = -INFINITY;
    for (std::size_t c = 0; c < num_classes; ++c) peak = std::max(peak, logits.at(c, i));
    double norm = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      out.at(c, i) = std::exp(logits.at(c, i) - peak);
      norm += out.at(c, i);
    }
    for (std::size_t c = 0; c < num_classes; ++c) out.at(c, i) /= norm;
  }
  return ProbabilityVolume(std::move(out));
}

ProbabilityVolume apply_temperature(const ChannelVolume& logits, double temperature) {
  check_temperature(temperature);
  ChannelVolume scaled = logits;
  for (double& v : scaled.values()) v /= temperature;
  return softmax(scaled);
}

LogitStream LogitStream::from_cases(const std::vector<LabeledLogits>& cases) {
  return LogitStream{cases.size(), [&cases](std::size_t k) { return cases.at(k); }};
}

double temperature_cross_entropy(const LabeledLogits& data, double temperature) {
  check_temperature(temperature);
  const CrossEntropyEval e = evaluate(data, temperature);
  return e.voxels > 0 ? e.sum / static_cast<double>(e.voxels) : 0.0;
}

TemperatureFit fit_temperature(const LogitStream& stream, const TemperatureSettings& settings) {
  if (stream.size == 0 || !stream.load) {
    throw std::invalid_argument("temperature fitting needs a nonempty validation stream");
  }
  check_temperature(settings.initial_temperature);
  if (settings.epochs < 0 || !(settings.learning_rate > 0.0)) {
    throw std::invalid_argument("temperature fit needs epochs >= 0 and a positive learning rate");
  }

  TemperatureFit fit;
  fit.settings = settings;
  double log_t = std::log(settings.initial_temperature);
  double first_moment = 0.0;
  double second_moment = 0.0;
  long step = 0;

  fit.initial_cross_entropy = stream_cross_entropy(stream, settings.initial_temperature);
  double best_t = settings.initial_temperature;
  double best_ce = fit.initial_cross_entropy;

  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    for (std::size_t k = 0; k < stream.size; ++k) {
      const double t = std::exp(log_t);
      const CrossEntropyEval e = evaluate(stream.load(k), t);
      if (e.voxels == 0) continue;
      const double inv = 1.0 / static_cast<double>(e.voxels);
      fit.trace.push_back({t, e.sum * inv});
      const double g = e.grad_log_t * inv;
      ++step;
      first_moment = settings.beta1 * first_moment + (1.0 - settings.beta1) * g;
      second_moment = settings.beta2 * second_moment + (1.0 - settings.beta2) * g * g;
      const double m_hat = first_moment / (1.0 - std::pow(settings.beta1, step));
      const double v_hat = second_moment / (1.0 - std::pow(settings.beta2, step));
      log_t -= settings.learning_rate * m_hat / (std::sqrt(v_hat) + settings.epsilon);
    }
    const double t = std::exp(log_t);
    const double ce = stream_cross_entropy(stream, t);
    if (ce <= best_ce) {
      best_ce = ce;
      best_t = t;
    }
  }

  fit.temperature = best_t;
  fit.final_cross_entropy = best_ce;
  return fit;
}

}  // namespace segcal
