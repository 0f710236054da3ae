#ifndef SEGCAL_BINNING_HPP_
#define SEGCAL_BINNING_HPP_

#include <array>
#include <cstddef>
#include <string_view>
#include <vector>

namespace segcal {

// Bin membership kernel. Hard is the square kernel (each probability lands in
// exactly one bin); Soft is the triangular kernel centred on each bin.
enum class Kernel { kHard, kSoft };

std::string_view to_string(Kernel kernel);
// Accepts "hard" or "soft"; throws std::invalid_argument otherwise.
Kernel parse_kernel(std::string_view name);

// Uniform partition of [0, 1] into `num_bins` bins.
//
// Bins are indexed from 0. Bin m covers [m/M, (m+1)/M), except the last bin
// which is closed at 1. Its centre is (2m+1)/(2M).
class BinningConfig {
 public:
  static constexpr int kDefaultBins = 20;

  explicit BinningConfig(int num_bins = kDefaultBins, Kernel kernel = Kernel::kHard);

  int num_bins() const { return num_bins_; }
  Kernel kernel() const { return kernel_; }

  // b_k = k / M for k in [0, M].
  double boundary(int k) const;
  double centre(int m) const;

  friend bool operator==(const BinningConfig&, const BinningConfig&) = default;

 private:
  int num_bins_;
  Kernel kernel_;
};

std::vector<double> bin_boundaries(const BinningConfig& config);

// Pointwise membership functions. `x` must lie in [0, 1] (std::domain_error
// otherwise) and `m` in [0, M) (std::out_of_range otherwise).
double membership_hard(double x, int m, int num_bins);
double membership_soft(double x, int m, int num_bins);

// d/dx of membership_soft. Kinks (the peak and both support endpoints) and
// the clamped edge regions report 0.
double membership_soft_derivative(double x, int m, int num_bins);

// Index of the unique hard bin holding x; consistent with the boundary
// comparisons against k/M used by membership_hard.
int hard_bin_index(double x, int num_bins);

// Nonzero memberships of one probability under a kernel: at most two bins.
struct BinWeight {
  int bin = 0;
  double weight = 0.0;
  double derivative = 0.0;
};

struct Memberships {
  std::array<BinWeight, 2> entries{};
  int size = 0;

  const BinWeight* begin() const { return entries.data(); }
  const BinWeight* end() const { return entries.data() + size; }
};

// Fast path used by tallies and losses. Equivalent to evaluating the
// pointwise functions over all bins and keeping the nonzero ones.
Memberships memberships(double x, const BinningConfig& config);

// Throws std::domain_error unless 0 <= x <= 1 (NaN included).
void check_probability(double x);

}  // namespace segcal

#endif  // SEGCAL_BINNING_HPP_
