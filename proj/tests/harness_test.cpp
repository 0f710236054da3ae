#include "segcal/harness.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "temp_dir.hpp"

namespace segcal::harness {
namespace {

SyntheticConfig tiny_data() {
  SyntheticConfig cfg;
  cfg.height = cfg.width = 32;
  cfg.min_radius = 4.0;
  cfg.max_radius = 8.0;
  cfg.noise_band = 1;
  cfg.num_train = 2;
  cfg.num_val = 1;
  cfg.num_test = 2;
  return cfg;
}

TrainConfig tiny_train(LossVariant variant) {
  TrainConfig tc;
  tc.variant = variant;
  tc.epochs = 20;
  tc.eval_every = 5;
  tc.hidden = 8;
  return tc;
}

TEST(Dataset, DeterministicInSeed) {
  const SyntheticConfig cfg = tiny_data();
  const SyntheticDataset a = generate_dataset(cfg);
  const SyntheticDataset b = generate_dataset(cfg);
  ASSERT_EQ(a.train.size(), 2u);
  for (std::size_t k = 0; k < a.train.size(); ++k) {
    EXPECT_EQ(a.train[k].id, b.train[k].id);
    EXPECT_EQ(a.train[k].image, b.train[k].image);
    EXPECT_EQ(a.train[k].labels, b.train[k].labels);
  }
  SyntheticConfig other = cfg;
  other.seed = 1;
  EXPECT_NE(generate_dataset(other).train[0].image, a.train[0].image);
}

TEST(Dataset, SplitIdsAndShapes) {
  const SyntheticDataset d = generate_dataset(tiny_data());
  EXPECT_EQ(d.train[1].id, "train_001");
  EXPECT_EQ(d.val[0].id, "val_000");
  EXPECT_EQ(d.test[0].id, "test_000");
  EXPECT_EQ(d.test[0].image.spatial_dims(), (std::vector<std::size_t>{32, 32}));
  EXPECT_EQ(d.test[0].labels.num_classes(), 3u);
}

TEST(Dataset, EveryImageHoldsEveryCleanClass) {
  SyntheticConfig cfg = tiny_data();
  cfg.num_train = 20;
  for (const SyntheticImage& im : generate_dataset(cfg).train) {
    for (std::size_t c = 0; c < cfg.num_classes; ++c) EXPECT_GT(im.clean_labels.foreground_count(c), 0u) << im.id;
  }
}

TEST(Dataset, MissingClassFraction) {
  SyntheticConfig cfg = tiny_data();
  cfg.num_train = 20;
  cfg.missing_class_fraction = 1.0;
  for (const SyntheticImage& im : generate_dataset(cfg).train) {
    int missing = 0;
    for (std::size_t c = 1; c < cfg.num_classes; ++c) missing += im.clean_labels.foreground_count(c) == 0;
    EXPECT_EQ(missing, 1) << im.id;
  }
}

TEST(Dataset, RejectsDegenerateConfigs) {
  SyntheticConfig cfg = tiny_data();
  cfg.height = 0;
  EXPECT_THROW(generate_dataset(cfg), std::invalid_argument);
  cfg = tiny_data();
  cfg.num_classes = 1;
  EXPECT_THROW(generate_dataset(cfg), std::invalid_argument);
  cfg = tiny_data();
  cfg.label_noise = 1.0;
  EXPECT_THROW(generate_dataset(cfg), std::invalid_argument);
  cfg = tiny_data();
  cfg.max_radius = 20.0;
  EXPECT_THROW(generate_dataset(cfg), std::invalid_argument);
}

TEST(Noise, ConfinedToBandAndToCandidates) {
  SyntheticConfig cfg = tiny_data();
  cfg.num_train = 30;
  cfg.noise_band = 2;
  std::size_t band = 0, flipped = 0;
  std::map<std::size_t, std::size_t> by_candidate_count;
  for (const SyntheticImage& im : generate_dataset(cfg).train) {
    for (std::size_t i = 0; i < im.labels.num_voxels(); ++i) {
      const auto cands = noise_candidates(cfg, im.clean_labels, i);
      const auto clean = im.clean_labels.indices()[i];
      const auto noisy = im.labels.indices()[i];
      if (cands.empty()) {
        ASSERT_EQ(noisy, clean) << im.id << " pixel " << i;
        continue;
      }
      ++band;
      if (noisy != clean) {
        ++flipped;
        ASSERT_TRUE(std::find(cands.begin(), cands.end(), noisy) != cands.end());
      }
    }
  }
  // Flip rate inside the band matches the configured rate (binomial, > 5 sigma margin).
  const double rate = static_cast<double>(flipped) / static_cast<double>(band);
  const double sigma = std::sqrt(0.2 * 0.8 / static_cast<double>(band));
  EXPECT_NEAR(rate, 0.2, 5 * sigma) << band << " band pixels";
}

TEST(Noise, PosteriorBelowOneAtBoundaries) {
  const SyntheticConfig cfg = tiny_data();
  const SyntheticDataset d = generate_dataset(cfg);
  const LabelVolume& clean = d.train[0].clean_labels;
  const std::vector<bool> boundary = boundary_mask(clean);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < clean.num_voxels(); ++i) {
    const std::vector<double> post = bayes_posterior(cfg, clean, i);
    double total = 0.0;
    for (double p : post) total += p;
    EXPECT_NEAR(total, 1.0, 1e-12);
    const double top = *std::max_element(post.begin(), post.end());
    if (boundary[i]) {
      EXPECT_NEAR(top, 0.8, 1e-12);
      ++checked;
    }
    if (noise_candidates(cfg, clean, i).empty()) EXPECT_EQ(top, 1.0);
  }
  EXPECT_GT(checked, 0u);
}

TEST(Noise, EmpiricalFrequencyMatchesPosterior) {
  // Pixels pooled by posterior value: within each pool the fraction keeping
  // its clean label must match the posterior.
  SyntheticConfig cfg = tiny_data();
  cfg.num_train = 40;
  std::map<long, std::pair<std::size_t, std::size_t>> pools;  // key: round(1e6 * P(own))
  for (const SyntheticImage& im : generate_dataset(cfg).train) {
    for (std::size_t i = 0; i < im.labels.num_voxels(); ++i) {
      const std::size_t own = im.clean_labels.indices()[i];
      const double p_own = bayes_posterior(cfg, im.clean_labels, i)[own];
      auto& pool = pools[std::lround(p_own * 1e6)];
      ++pool.first;
      pool.second += im.labels.indices()[i] == own;
    }
  }
  for (const auto& [key, pool] : pools) {
    const double p = static_cast<double>(key) / 1e6;
    const double freq = static_cast<double>(pool.second) / static_cast<double>(pool.first);
    const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(pool.first));
    EXPECT_NEAR(freq, p, 5 * sigma + 1e-12) << pool.first << " pixels";
  }
}

TEST(Features, ShapeAndValues) {
  ChannelVolume image(1, {5, 5});
  for (std::size_t i = 0; i < 25; ++i) image.at(0, i) = static_cast<double>(i);
  const ChannelVolume f = pixel_features(image);
  ASSERT_EQ(f.num_classes(), kNumFeatures);
  const std::size_t centre = 12;
  EXPECT_EQ(f.at(0, centre), 12.0);
  EXPECT_NEAR(f.at(1, centre), 12.0, 1e-12);  // 3x3 mean of a linear ramp
  // 3x3 window offsets from the centre value: -6 -5 -4 -1 0 1 4 5 6.
  const double var3 = (36 + 25 + 16 + 1 + 0 + 1 + 16 + 25 + 36) / 9.0;
  EXPECT_NEAR(f.at(2, centre), std::sqrt(var3), 1e-12);
  EXPECT_NEAR(f.at(3, centre), 12.0, 1e-12);
  EXPECT_THROW(pixel_features(ChannelVolume(2, {4, 4})), std::invalid_argument);
}

TEST(Model, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  ToyModel model(3, 5, 11);
  ChannelVolume image(1, {6, 6});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : image.values()) v = normal(rng);
  const ChannelVolume features = pixel_features(image);
  ChannelVolume upstream(3, {6, 6});
  for (double& v : upstream.values()) v = normal(rng);

  auto objective = [&]() {
    const ChannelVolume z = model.logits(features);
    double s = 0.0;
    for (std::size_t k = 0; k < z.values().size(); ++k) s += z.values()[k] * upstream.values()[k];
    return s;
  };
  std::vector<double> grad(model.parameters().size(), 0.0);
  model.backward(features, upstream, grad);
  const double h = 1e-6;
  double diff = 0.0, norm = 0.0;
  for (std::size_t k = 0; k < grad.size(); ++k) {
    double& p = model.parameters()[k];
    const double saved = p;
    p = saved + h;
    const double up = objective();
    p = saved - h;
    const double down = objective();
    p = saved;
    const double fd = (up - down) / (2 * h);
    diff += (fd - grad[k]) * (fd - grad[k]);
    norm += fd * fd;
  }
  EXPECT_LT(std::sqrt(diff / norm), 1e-6);
}

TEST(Train, ReproducibleBitwise) {
  const SyntheticDataset d = generate_dataset(tiny_data());
  const TrainConfig tc = tiny_train(LossVariant::kDiceCeSoftAce);
  const TrainResult a = train(d, tc);
  const TrainResult b = train(d, tc);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.test.macro.mean.ace, b.test.macro.mean.ace);
  EXPECT_EQ(a.test.dsc, b.test.dsc);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
}

TEST(Train, ZeroLambdaEqualsDiceCe) {
  const SyntheticDataset d = generate_dataset(tiny_data());
  const TrainResult base = train(d, tiny_train(LossVariant::kDiceCe));
  for (LossVariant v : {LossVariant::kDiceCeHardAce, LossVariant::kDiceCeSoftAce}) {
    TrainConfig tc = tiny_train(v);
    tc.lambda = 0.0;
    const TrainResult r = train(d, tc);
    EXPECT_EQ(r.model, base.model) << to_string(v);
    EXPECT_EQ(r.test.dsc, base.test.dsc);
  }
}

TEST(Train, CheckpointIsBestValidationEpoch) {
  const SyntheticDataset d = generate_dataset(tiny_data());
  const TrainResult r = train(d, tiny_train(LossVariant::kDiceCe));
  double best = -1.0;
  int best_epoch = 0;
  for (const EpochRecord& e : r.history) {
    if (e.val_dsc >= 0.0 && e.val_dsc >= best) {
      best = e.val_dsc;
      best_epoch = e.epoch;
    }
  }
  EXPECT_EQ(r.best_epoch, best_epoch);
  EXPECT_EQ(r.best_val_dsc, best);
  EXPECT_EQ(r.history.back().epoch, 20);
  EXPECT_GE(r.history.back().val_dsc, 0.0);
}

TEST(Train, GradientClipBoundsTheStep) {
  const SyntheticDataset d = generate_dataset(tiny_data());
  TrainConfig tc = tiny_train(LossVariant::kDiceCeSoftAce);
  tc.epochs = 1;
  tc.eval_every = 1;
  tc.max_grad_norm = 1e-3;
  const TrainResult r = train(d, tc);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_GT(r.history[0].grad_norm, tc.max_grad_norm);
  const ToyModel init(3, tc.hidden, tc.seed);
  double moved = 0.0;
  for (std::size_t k = 0; k < init.parameters().size(); ++k) {
    const double delta = r.model.parameters()[k] - init.parameters()[k];
    moved += delta * delta;
  }
  EXPECT_NEAR(std::sqrt(moved), tc.learning_rate * tc.max_grad_norm, 1e-12);

  tc.max_grad_norm = 0.0;
  const TrainResult free = train(d, tc);
  moved = 0.0;
  for (std::size_t k = 0; k < init.parameters().size(); ++k) {
    const double delta = free.model.parameters()[k] - init.parameters()[k];
    moved += delta * delta;
  }
  EXPECT_NEAR(std::sqrt(moved), tc.learning_rate * free.history[0].grad_norm, 1e-12);
}

TEST(Train, DivergenceAborts) {
  SyntheticDataset d = generate_dataset(tiny_data());
  d.train[1].image.at(0, 100) = std::nan("");
  try {
    train(d, tiny_train(LossVariant::kCeOnly));
    FAIL() << "expected divergence";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos) << e.what();
  }
}

TEST(Train, SeparableDataIsLearnedByEveryVariant) {
  SyntheticConfig cfg;
  cfg.height = cfg.width = 64;
  cfg.min_radius = 8.0;
  cfg.max_radius = 14.0;
  cfg.label_noise = 0.0;
  cfg.intensity_noise = 0.35;
  cfg.num_train = 4;
  cfg.num_val = 2;
  cfg.num_test = 4;
  const SyntheticDataset d = generate_dataset(cfg);
  for (LossVariant v : {LossVariant::kDiceCe, LossVariant::kCeOnly, LossVariant::kDiceCeHardAce,
                        LossVariant::kDiceCeSoftAce}) {
    TrainConfig tc;
    tc.variant = v;
    EXPECT_GE(train(d, tc).test.dsc, 0.8) << to_string(v);
  }
}

TEST(Variants, NamesRoundTrip) {
  for (LossVariant v : {LossVariant::kDiceCe, LossVariant::kCeOnly, LossVariant::kDiceCeHardAce,
                        LossVariant::kDiceCeSoftAce}) {
    EXPECT_EQ(parse_variant(to_string(v)), v);
  }
  EXPECT_THROW(parse_variant("focal"), std::invalid_argument);
}

TEST(WriteSplit, ManifestLoadsBack) {
  const SyntheticDataset d = generate_dataset(tiny_data());
  const TrainResult r = train(d, tiny_train(LossVariant::kDiceCe));
  const testing::TempDir dir;
  const auto path = write_split(r.model, d.test, d.config, "test", dir.path());
  const DatasetManifest m = load_manifest(path);
  ASSERT_EQ(m.cases.size(), d.test.size());
  EXPECT_EQ(m.split, "test");
  EXPECT_EQ(m.num_classes(), 3u);
  ASSERT_EQ(m.hec.size(), 1u);
  EXPECT_EQ(m.hec[0].members, (std::vector<std::size_t>{1, 2}));
  const LabelVolume labels = load_labels(m.cases[0].label, 3);
  EXPECT_EQ(labels, d.test[0].labels);
  const ProbabilityVolume p = load_probabilities(m.cases[0].prediction);
  const ProbabilityVolume direct = predict(r.model, d.test[0]);
  for (std::size_t k = 0; k < p.field().values().size(); ++k) {
    EXPECT_EQ(p.field().values()[k], static_cast<float>(direct.field().values()[k]));
  }
  EXPECT_TRUE(m.cases[0].logits.has_value());
}

TEST(Sweep, CellsMatchDirectRunsAndOrdering) {
  const SyntheticConfig cfg = tiny_data();
  const TrainConfig base = tiny_train(LossVariant::kDiceCeHardAce);
  const std::vector<double> values = {5, 20};
  const std::vector<std::uint64_t> seeds = {0, 1};
  const SweepResult serial = sweep(cfg, base, SweepDimension::kBins, values, seeds, 1);
  const SweepResult parallel = sweep(cfg, base, SweepDimension::kBins, values, seeds, 3);
  ASSERT_EQ(serial.cells.size(), 4u);
  EXPECT_EQ(sweep_csv(serial), sweep_csv(parallel));
  EXPECT_EQ(serial.cells[1].value, 5.0);
  EXPECT_EQ(serial.cells[1].seed, 1u);
  EXPECT_EQ(serial.cells[2].value, 20.0);

  SyntheticConfig dc = cfg;
  dc.seed = 1;
  TrainConfig tc = base;
  tc.seed = 1;
  tc.num_bins = 5;
  const TrainResult direct = train(generate_dataset(dc), tc);
  EXPECT_EQ(serial.cells[1].dsc, direct.test.dsc);
  EXPECT_EQ(serial.cells[1].macro_ace, direct.test.macro.mean.ace);

  const double mean = serial.mean(LossVariant::kDiceCeHardAce, 5, &SweepCell::dsc);
  EXPECT_DOUBLE_EQ(mean, 0.5 * (serial.cells[0].dsc + serial.cells[1].dsc));

  const std::string csv = sweep_csv(serial);
  EXPECT_EQ(csv.rfind("variant,dimension,value,seed,dsc,macro_ace,micro_ace,macro_ece,macro_mce\n", 0), 0u);
  EXPECT_NE(csv.find("dsc_ce_hl1ace,bins,5,0,"), std::string::npos);
  EXPECT_THROW(sweep(cfg, base, SweepDimension::kBins, {}, seeds, 1), std::invalid_argument);

  const LinePlot plot = sweep_plot(serial, true);
  ASSERT_EQ(plot.series.size(), 1u);
  EXPECT_EQ(plot.series[0].x, values);
}

TEST(Spearman, KnownValues) {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{5, 6, 7, 8, 7}), 0.8207826816681233);
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{10, 8, 6, 4, 2}), -1.0);
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{1, 4, 9, 16, 25}), 1.0);
}

TEST(Spearman, MatchesPearsonOfRanksOracle) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> pick(0, 5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(9), b(9);
    for (double& v : a) v = pick(rng);
    for (double& v : b) v = pick(rng);
    auto rank = [](const std::vector<double>& v) {
      std::vector<double> r(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        double less = 0, equal = 0;
        for (double w : v) {
          less += w < v[i];
          equal += w == v[i];
        }
        r[i] = less + (equal + 1) / 2.0;
      }
      return r;
    };
    const auto ra = rank(a), rb = rank(b);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < 9; ++i) {
      ma += ra[i] / 9;
      mb += rb[i] / 9;
    }
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < 9; ++i) {
      sab += (ra[i] - ma) * (rb[i] - mb);
      saa += (ra[i] - ma) * (ra[i] - ma);
      sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0 || sbb == 0) continue;
    EXPECT_NEAR(spearman(a, b), sab / std::sqrt(saa * sbb), 1e-12);
  }
}

}  // namespace
}  // namespace segcal::harness
