#ifndef SEGCAL_TEMPERATURE_HPP_
#define SEGCAL_TEMPERATURE_HPP_

#include <cstddef>
#include <functional>
#include <vector>

#include "segcal/volume.hpp"

namespace segcal {

ProbabilityVolume softmax(const ChannelVolume& logits);

// softmax(logits / T). Throws std::invalid_argument unless T > 0.
ProbabilityVolume apply_temperature(const ChannelVolume& logits, double temperature);

struct LabeledLogits {
  ChannelVolume logits;
  LabelVolume labels;
};

// Ordered, possibly lazily loaded validation stream. `load` is called once
// per case per epoch, in index order.
struct LogitStream {
  std::size_t size = 0;
  std::function<LabeledLogits(std::size_t)> load;

  static LogitStream from_cases(const std::vector<LabeledLogits>& cases);
};

// Voxel-mean cross-entropy of softmax(logits / T) against the labels.
double temperature_cross_entropy(const LabeledLogits& data, double temperature);

struct TemperatureSettings {
  double learning_rate = 1e-3;
  int epochs = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double initial_temperature = 1.0;
};

struct TemperatureStep {
  double temperature = 1.0;
  double cross_entropy = 0.0;  // of the case consumed by this step, before the update
};

struct TemperatureFit {
  double temperature = 1.0;
  std::vector<TemperatureStep> trace;
  TemperatureSettings settings;
  double initial_cross_entropy = 0.0;  // full-stream mean at the initial T
  double final_cross_entropy = 0.0;    // full-stream mean at the returned T
};

// Fits a single temperature by Adam on log T, one case per step, cases in
// stream order. The best full-stream temperature seen at epoch boundaries
// (including the initial one) is returned, so the final CE never exceeds the
// initial CE. Throws std::invalid_argument on an empty stream.
TemperatureFit fit_temperature(const LogitStream& stream, const TemperatureSettings& settings = {});

}  // namespace segcal

#endif  // SEGCAL_TEMPERATURE_HPP_
