#include "segcal/binning.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace segcal {
namespace {

double centre_of(int m, int num_bins) {
  return static_cast<double>(2 * m + 1) / static_cast<double>(2 * num_bins);
}

double boundary_of(int k, int num_bins) {
  return static_cast<double>(k) / static_cast<double>(num_bins);
}

double triangle(double x, double centre, int num_bins) {
  return std::max(0.0, 1.0 - num_bins * std::abs(x - centre));
}

void check_bin(int m, int num_bins) {
  if (num_bins < 1) throw std::invalid_argument("bin count must be >= 1");
  if (m < 0 || m >= num_bins) {
    throw std::out_of_range("bin index " + std::to_string(m) + " outside [0, " +
                            std::to_string(num_bins) + ")");
  }
}

}  // namespace

std::string_view to_string(Kernel kernel) {
  return kernel == Kernel::kHard ? "hard" : "soft";
}

Kernel parse_kernel(std::string_view name) {
  if (name == "hard") return Kernel::kHard;
  if (name == "soft") return Kernel::kSoft;
  throw std::invalid_argument("unknown kernel '" + std::string(name) + "' (expected hard|soft)");
}

BinningConfig::BinningConfig(int num_bins, Kernel kernel) : num_bins_(num_bins), kernel_(kernel) {
  if (num_bins < 1) {
    throw std::invalid_argument("bin count must be >= 1, got " + std::to_string(num_bins));
  }
}

double BinningConfig::boundary(int k) const { return boundary_of(k, num_bins_); }

double BinningConfig::centre(int m) const { return centre_of(m, num_bins_); }

std::vector<double> bin_boundaries(const BinningConfig& config) {
  std::vector<double> out(static_cast<std::size_t>(config.num_bins()) + 1);
  for (int k = 0; k <= config.num_bins(); ++k) out[k] = config.boundary(k);
  return out;
}

void check_probability(double x) {
  if (!(x >= 0.0 && x <= 1.0)) {
    throw std::domain_error("probability " + std::to_string(x) + " outside [0, 1]");
  }
}

int hard_bin_index(double x, int num_bins) {
  check_probability(x);
  int m = std::clamp(static_cast<int>(x * num_bins), 0, num_bins - 1);
  // x * M can round across a boundary; settle against the exact k/M values.
  while (m + 1 < num_bins && x >= boundary_of(m + 1, num_bins)) ++m;
  while (m > 0 && x < boundary_of(m, num_bins)) --m;
  return m;
}

double membership_hard(double x, int m, int num_bins) {
  check_bin(m, num_bins);
  check_probability(x);
  const double lo = boundary_of(m, num_bins);
  const double hi = boundary_of(m + 1, num_bins);
  if (m == num_bins - 1) return x >= lo ? 1.0 : 0.0;
  return (x >= lo && x < hi) ? 1.0 : 0.0;
}

double membership_soft(double x, int m, int num_bins) {
  check_bin(m, num_bins);
  check_probability(x);
  const double centre = centre_of(m, num_bins);
  if (m == 0 && x < centre) return 1.0;
  if (m == num_bins - 1 && x > centre) return 1.0;
  if (x == centre) return 1.0;
  // Open support, so a neighbour's centre never picks up rounding residue.
  if (x > centre_of(m - 1, num_bins) && x < centre_of(m + 1, num_bins)) {
    return triangle(x, centre, num_bins);
  }
  return 0.0;
}

double membership_soft_derivative(double x, int m, int num_bins) {
  check_bin(m, num_bins);
  check_probability(x);
  const double centre = centre_of(m, num_bins);
  if (m == 0 && x < centre) return 0.0;
  if (m == num_bins - 1 && x > centre) return 0.0;
  if (x > centre_of(m - 1, num_bins) && x < centre_of(m + 1, num_bins) && x != centre) {
    return x > centre ? -static_cast<double>(num_bins) : static_cast<double>(num_bins);
  }
  return 0.0;
}

Memberships memberships(double x, const BinningConfig& config) {
  check_probability(x);
  const int num_bins = config.num_bins();
  Memberships out;
  if (config.kernel() == Kernel::kHard) {
    out.entries[0] = {hard_bin_index(x, num_bins), 1.0, 0.0};
    out.size = 1;
    return out;
  }

  if (x < centre_of(0, num_bins)) {
    out.entries[0] = {0, 1.0, 0.0};
    out.size = 1;
    return out;
  }
  if (x > centre_of(num_bins - 1, num_bins)) {
    out.entries[0] = {num_bins - 1, 1.0, 0.0};
    out.size = 1;
    return out;
  }

  // Left neighbour j with centre(j) <= x < centre(j+1).
  int j = std::clamp(static_cast<int>(std::floor(x * num_bins - 0.5)), 0, num_bins - 1);
  while (j + 1 < num_bins && x >= centre_of(j + 1, num_bins)) ++j;
  while (j > 0 && x < centre_of(j, num_bins)) --j;

  const double left_centre = centre_of(j, num_bins);
  const double slope = static_cast<double>(num_bins);
  out.entries[0] = {j, triangle(x, left_centre, num_bins), x == left_centre ? 0.0 : -slope};
  out.size = 1;
  if (j + 1 < num_bins && x != left_centre) {
    out.entries[1] = {j + 1, triangle(x, centre_of(j + 1, num_bins), num_bins), slope};
    out.size = 2;
  }
  return out;
}

}  // namespace segcal
