#include "segcal/binning.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <stdexcept>

namespace segcal {
namespace {

TEST(Binning, BoundariesAreUniform) {
  const std::vector<double> five = bin_boundaries(BinningConfig(5));
  const std::vector<double> expect = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  ASSERT_EQ(five.size(), expect.size());
  for (std::size_t k = 0; k < expect.size(); ++k) EXPECT_DOUBLE_EQ(five[k], expect[k]);

  EXPECT_EQ(bin_boundaries(BinningConfig(1)), (std::vector<double>{0.0, 1.0}));

  const std::vector<double> twenty = bin_boundaries(BinningConfig(20));
  ASSERT_EQ(twenty.size(), 21u);
  EXPECT_EQ(twenty.front(), 0.0);
  EXPECT_EQ(twenty.back(), 1.0);
  EXPECT_DOUBLE_EQ(twenty[1], 0.05);
  for (std::size_t k = 1; k < twenty.size(); ++k) EXPECT_LT(twenty[k - 1], twenty[k]);
}

TEST(Binning, RejectsNonPositiveBinCount) {
  EXPECT_THROW(BinningConfig(0), std::invalid_argument);
  EXPECT_THROW(BinningConfig(-3), std::invalid_argument);
}

TEST(Binning, KernelNamesRoundTrip) {
  EXPECT_EQ(parse_kernel("hard"), Kernel::kHard);
  EXPECT_EQ(parse_kernel(to_string(Kernel::kSoft)), Kernel::kSoft);
  EXPECT_THROW(parse_kernel("gaussian"), std::invalid_argument);
}

TEST(Binning, HardMembershipHalfOpenRightward) {
  EXPECT_EQ(membership_hard(0.1, 0, 5), 1.0);
  EXPECT_EQ(hard_bin_index(0.2, 5), 1);
  EXPECT_EQ(membership_hard(0.2, 0, 5), 0.0);
  EXPECT_EQ(membership_hard(0.2, 1, 5), 1.0);
  EXPECT_EQ(hard_bin_index(1.0, 5), 4);
  EXPECT_EQ(membership_hard(1.0, 4, 5), 1.0);
  EXPECT_EQ(hard_bin_index(0.0, 5), 0);
}

TEST(Binning, HardIndexAgreesWithBoundaryComparisons) {
  // Values like 0.6 = 3 * 0.2 in decimal are not exactly 3/5 in binary; the
  // index must follow the same k/M comparison as the membership function.
  for (int num_bins : {3, 5, 7, 10, 20, 50, 100}) {
    const BinningConfig cfg(num_bins);
    for (int k = 0; k <= num_bins; ++k) {
      for (double x : {cfg.boundary(k), std::nextafter(cfg.boundary(k), 0.0),
                       std::nextafter(cfg.boundary(k), 1.0)}) {
        if (x < 0.0 || x > 1.0) continue;
        const int m = hard_bin_index(x, num_bins);
        EXPECT_EQ(membership_hard(x, m, num_bins), 1.0) << "x=" << x << " M=" << num_bins;
        EXPECT_GE(x, cfg.boundary(m));
        if (m < num_bins - 1) EXPECT_LT(x, cfg.boundary(m + 1));
      }
    }
  }
}

TEST(Binning, HardPartition) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const int num_bins = 1 + static_cast<int>(rng() % 60);
    const double x = trial % 10 == 0 ? static_cast<double>(rng() % (num_bins + 1)) / num_bins : unit(rng);
    int ones = 0;
    for (int m = 0; m < num_bins; ++m) ones += membership_hard(x, m, num_bins) == 1.0;
    EXPECT_EQ(ones, 1) << "x=" << x << " M=" << num_bins;
  }
}

TEST(Binning, SoftShape) {
  const int num_bins = 5;
  const BinningConfig cfg(num_bins, Kernel::kSoft);
  for (int m = 0; m < num_bins; ++m) {
    EXPECT_NEAR(membership_soft(cfg.centre(m), m, num_bins), 1.0, 1e-15);
    EXPECT_EQ(membership_hard(cfg.centre(m), m, num_bins), 1.0);
  }
  for (int m = 1; m < num_bins; ++m) {
    EXPECT_NEAR(membership_soft(cfg.boundary(m), m, num_bins), 0.5, 1e-12);
    EXPECT_NEAR(membership_soft(cfg.boundary(m), m - 1, num_bins), 0.5, 1e-12);
  }
  EXPECT_EQ(membership_soft(0.0, 0, num_bins), 1.0);
  EXPECT_EQ(membership_soft(1.0, num_bins - 1, num_bins), 1.0);
  EXPECT_EQ(membership_soft(0.0, 1, num_bins), 0.0);
  EXPECT_EQ(membership_soft(0.95, 0, num_bins), 0.0);
}

TEST(Binning, SoftSymmetricAroundInteriorCentres) {
  const int num_bins = 10;
  const BinningConfig cfg(num_bins, Kernel::kSoft);
  for (int m = 1; m + 1 < num_bins; ++m) {
    for (double d : {0.0, 0.01, 0.037, 0.05, 0.08, 0.1}) {
      EXPECT_NEAR(membership_soft(cfg.centre(m) + d, m, num_bins),
                  membership_soft(cfg.centre(m) - d, m, num_bins), 1e-12);
    }
  }
}

TEST(Binning, SoftPartitionOfUnity) {
  for (int num_bins : {1, 2, 3, 5, 10, 20, 50, 100}) {
    for (int k = 0; k <= 10000; ++k) {
      const double x = k / 10000.0;
      double sum = 0.0;
      for (int m = 0; m < num_bins; ++m) sum += membership_soft(x, m, num_bins);
      ASSERT_NEAR(sum, 1.0, 1e-12) << "x=" << x << " M=" << num_bins;
    }
  }
}

TEST(Binning, SoftDerivativeConventions) {
  const int num_bins = 5;
  const BinningConfig cfg(num_bins, Kernel::kSoft);
  // Descending flank of bin 2, ascending flank of bin 3.
  const double x = 0.5 * (cfg.centre(2) + cfg.centre(3));
  EXPECT_EQ(membership_soft_derivative(x, 2, num_bins), -num_bins);
  EXPECT_EQ(membership_soft_derivative(x, 3, num_bins), num_bins);
  EXPECT_EQ(membership_soft_derivative(cfg.centre(2), 2, num_bins), 0.0);
  EXPECT_EQ(membership_soft_derivative(cfg.centre(3), 2, num_bins), 0.0);
  EXPECT_EQ(membership_soft_derivative(0.01, 0, num_bins), 0.0);
  EXPECT_EQ(membership_soft_derivative(0.99, num_bins - 1, num_bins), 0.0);
  EXPECT_EQ(membership_soft_derivative(0.9, 0, num_bins), 0.0);
}

TEST(Binning, SoftDerivativeMatchesFiniteDifferences) {
  const double h = 1e-7;
  for (int num_bins : {1, 2, 5, 20, 100}) {
    const BinningConfig cfg(num_bins, Kernel::kSoft);
    for (int k = 0; k <= 2000; ++k) {
      const double x = k / 2000.0;
      if (x - h < 0.0 || x + h > 1.0) continue;
      bool near_kink = false;
      for (int m = 0; m < num_bins; ++m) near_kink |= std::abs(x - cfg.centre(m)) < 10 * h;
      if (near_kink) continue;
      for (int m = 0; m < num_bins; ++m) {
        const double fd = (membership_soft(x + h, m, num_bins) - membership_soft(x - h, m, num_bins)) / (2 * h);
        ASSERT_NEAR(membership_soft_derivative(x, m, num_bins), fd, 1e-6)
            << "x=" << x << " m=" << m << " M=" << num_bins;
      }
    }
  }
}

TEST(Binning, FastMembershipsMatchPointwise) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (Kernel kernel : {Kernel::kHard, Kernel::kSoft}) {
    for (int num_bins : {1, 2, 5, 20, 100}) {
      const BinningConfig cfg(num_bins, kernel);
      for (int trial = 0; trial < 500; ++trial) {
        double x = unit(rng);
        if (trial % 7 == 0) x = cfg.boundary(static_cast<int>(rng() % (num_bins + 1)));
        if (trial % 11 == 0) x = cfg.centre(static_cast<int>(rng() % num_bins));
        std::vector<double> weights(num_bins, 0.0), slopes(num_bins, 0.0);
        for (const BinWeight& bw : memberships(x, cfg)) {
          weights[bw.bin] += bw.weight;
          slopes[bw.bin] += bw.derivative;
        }
        for (int m = 0; m < num_bins; ++m) {
          const double w = kernel == Kernel::kHard ? membership_hard(x, m, num_bins)
                                                   : membership_soft(x, m, num_bins);
          const double d = kernel == Kernel::kHard ? 0.0 : membership_soft_derivative(x, m, num_bins);
          ASSERT_NEAR(weights[m], w, 1e-15) << "x=" << x << " m=" << m;
          ASSERT_EQ(slopes[m], d) << "x=" << x << " m=" << m;
        }
      }
    }
  }
}

TEST(Binning, RejectsOutOfRangeInputs) {
  EXPECT_THROW(membership_hard(-0.01, 0, 5), std::domain_error);
  EXPECT_THROW(membership_soft(1.01, 0, 5), std::domain_error);
  EXPECT_THROW(membership_soft_derivative(std::nan(""), 0, 5), std::domain_error);
  EXPECT_THROW(memberships(2.0, BinningConfig(5)), std::domain_error);
  EXPECT_THROW(membership_hard(0.5, 5, 5), std::out_of_range);
  EXPECT_THROW(membership_soft(0.5, -1, 5), std::out_of_range);
}

}  // namespace
}  // namespace segcal
