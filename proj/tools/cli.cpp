#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "segcal/binning.hpp"
#include "segcal/harness.hpp"
#include "segcal/loss.hpp"
#include "segcal/reliability.hpp"
#include "segcal/temperature.hpp"
#include "segcal/viz.hpp"
#include "segcal/volume.hpp"
#include "segcal/volume_io.hpp"

namespace segcal::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// A failed check that is not a usage problem (exit code 1).
struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string default_out() {
  const char* env = std::getenv(kOutputEnv);
  return env && *env ? env : "segcal_out";
}

struct EvalOptions {
  std::string manifest;
  int bins = BinningConfig::kDefaultBins;
  std::string kernel = "hard";
  bool include_background = false;
  std::string missing = "skip";
  std::string out = default_out();
  std::size_t jobs = 1;

  BinningConfig binning() const { return BinningConfig(bins, parse_kernel(kernel)); }
  ClassSelection selection() const {
    ClassSelection s;
    s.include_background = include_background;
    s.missing = parse_missing_policy(missing);
    return s;
  }
};

void add_eval_flags(CLI::App* app, EvalOptions& o) {
  app->add_option("--manifest", o.manifest, "dataset manifest (JSON)")->required();
  app->add_option("--bins", o.bins, "number of bins M")->check(CLI::PositiveNumber);
  app->add_option("--kernel", o.kernel, "binning kernel")->check(CLI::IsMember({"hard", "soft"}));
  app->add_flag("--include-background", o.include_background, "include class 0 in class averages");
  app->add_option("--missing", o.missing, "classes absent from an image")
      ->check(CLI::IsMember({"skip", "include"}));
  app->add_option("--out", o.out, std::string("output directory (default $") + kOutputEnv + ")");
  app->add_option("--jobs", o.jobs, "worker threads over cases")->check(CLI::PositiveNumber);
}

// Runs fn(k) for k in [0, n) on up to `jobs` threads. The exception of the
// lowest failing index is rethrown so errors do not depend on scheduling.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < n; k = next++) {
      try {
        fn(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(std::max<std::size_t>(jobs, 1), std::max<std::size_t>(n, 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct Case {
  ProbabilityVolume probs;
  LabelVolume labels;
};

Case load_case(const DatasetManifest& manifest, std::size_t k) {
  const ManifestCase& mc = manifest.cases[k];
  try {
    Case c{load_probabilities(mc.prediction), load_labels(mc.label, manifest.num_classes())};
    if (c.probs.spatial_dims() != c.labels.spatial_dims()) {
      throw IoError("prediction and label shapes differ");
    }
    return c;
  } catch (const std::exception& e) {
    throw IoError("case '" + mc.id + "': " + e.what());
  }
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width) {
  // Width counted in code points so the "±" sign does not skew columns.
  std::size_t cps = 0;
  for (unsigned char ch : s) cps += (ch & 0xC0) != 0x80;
  return s + std::string(width > cps ? width - cps : 0, ' ');
}

std::string mean_std(double mean, const std::optional<double>& sd) {
  return sd ? fixed(mean) + " ± " + fixed(*sd) : fixed(mean);
}

json metrics_json(const ClassMetrics& m) { return json{{"ace", m.ace}, {"ece", m.ece}, {"mce", m.mce}}; }

json report_json(const CalibrationReport& r, const std::vector<std::string>& class_names) {
  json j;
  j["averaging"] = std::string(to_string(r.averaging));
  j["defined"] = r.defined;
  j["num_images"] = r.num_images;
  j["mean"] = metrics_json(r.mean);
  if (r.stddev) j["stddev"] = metrics_json(*r.stddev);
  if (r.dsc) j["dsc"] = *r.dsc;
  if (r.dsc_stddev) j["dsc_stddev"] = *r.dsc_stddev;
  json per_class = json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    json pc = metrics_json(r.per_class[c]);
    pc["class"] = c < class_names.size() ? class_names[c] : std::to_string(c);
    pc["included"] = c < r.included.size() && r.included[c];
    per_class.push_back(std::move(pc));
  }
  j["per_class"] = std::move(per_class);
  return j;
}

std::string report_table(const std::vector<std::pair<std::string, const CalibrationReport*>>& rows) {
  std::ostringstream out;
  out << pad("averaging", 12) << pad("ACE", 20) << pad("ECE", 20) << pad("MCE", 20) << "DSC\n";
  for (const auto& [name, r] : rows) {
    auto sd = [&](double ClassMetrics::*f) -> std::optional<double> {
      if (!r->stddev) return std::nullopt;
      return (*r->stddev).*f;
    };
    out << pad(name, 12) << pad(mean_std(r->mean.ace, sd(&ClassMetrics::ace)), 20)
        << pad(mean_std(r->mean.ece, sd(&ClassMetrics::ece)), 20)
        << pad(mean_std(r->mean.mce, sd(&ClassMetrics::mce)), 20)
        << (r->dsc ? mean_std(*r->dsc, r->dsc_stddev) : std::string("-")) << '\n';
  }
  return out.str();
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// metrics

struct DatasetReports {
  std::vector<CalibrationReport> per_image;
  std::vector<ReliabilityCurve> curves;
  CalibrationReport macro;
  CalibrationReport micro;
};

DatasetReports evaluate_cases(std::size_t n, std::size_t jobs, const BinningConfig& binning,
                              const ClassSelection& selection, std::size_t num_classes,
                              const std::function<Case(std::size_t)>& load) {
  DatasetReports out;
  out.per_image.resize(n);
  out.curves.assign(n, ReliabilityCurve(num_classes, binning));
  std::vector<ReliabilityTally> tallies(n, ReliabilityTally(num_classes, binning));
  parallel_for(n, jobs, [&](std::size_t k) {
    const Case c = load(k);
    tallies[k] = tally_image(c.probs, c.labels, binning);
    out.curves[k] = finalize(tallies[k]);
    const std::vector<bool> mask = select_classes(out.curves[k].foreground_voxels, selection);
    out.per_image[k] = calibration_metrics(out.curves[k], mask);
    const DiceScores dice = hard_dice(c.probs, c.labels, mask);
    if (dice.defined) out.per_image[k].dsc = dice.mean;
  });
  // Merged in case order whatever the thread count.
  ReliabilityTally dataset(num_classes, binning);
  for (const ReliabilityTally& t : tallies) dataset.merge_from(t);
  out.macro = macro_report(out.per_image);
  out.micro = micro_report(dataset, selection);
  return out;
}

json dataset_json(const DatasetReports& r, const DatasetManifest& manifest,
                  const std::vector<std::string>& class_names) {
  json j;
  json images = json::array();
  for (std::size_t k = 0; k < r.per_image.size(); ++k) {
    json img = report_json(r.per_image[k], class_names);
    img["id"] = manifest.cases[k].id;
    images.push_back(std::move(img));
  }
  j["macro"] = report_json(r.macro, class_names);
  j["micro"] = report_json(r.micro, class_names);
  j["per_image"] = std::move(images);
  return j;
}

json config_json(const EvalOptions& o) {
  return json{{"bins", o.bins},
              {"kernel", o.kernel},
              {"include_background", o.include_background},
              {"missing", o.missing}};
}

int cmd_metrics(const EvalOptions& o) {
  const DatasetManifest manifest = load_manifest(o.manifest);
  const BinningConfig binning = o.binning();
  const ClassSelection selection = o.selection();
  const DatasetReports reports =
      evaluate_cases(manifest.cases.size(), o.jobs, binning, selection, manifest.num_classes(),
                     [&](std::size_t k) { return load_case(manifest, k); });

  json doc;
  doc["manifest"] = fs::path(o.manifest).filename().string();
  doc["split"] = manifest.split;
  doc["config"] = config_json(o);
  doc["classes"] = manifest.classes;
  doc["results"] = dataset_json(reports, manifest, manifest.classes);

  std::string table = report_table({{"macro", &reports.macro}, {"micro", &reports.micro}});

  if (!manifest.hec.empty()) {
    // Composite classes evaluated as independent multi-label channels.
    std::vector<std::string> names;
    for (const HecClass& h : manifest.hec) names.push_back(h.name);
    ClassSelection hec_selection = selection;
    hec_selection.include_background = true;
    const DatasetReports hec = evaluate_cases(
        manifest.cases.size(), o.jobs, binning, hec_selection, manifest.hec.size(), [&](std::size_t k) {
          const Case c = load_case(manifest, k);
          ComposedVolumes v = compose_hierarchical_classes(c.labels, c.probs, manifest.hec);
          return Case{std::move(v.probs), std::move(v.labels)};
        });
    doc["hec"] = dataset_json(hec, manifest, names);
    table += "\nhierarchical classes\n" +
             report_table({{"macro", &hec.macro}, {"micro", &hec.micro}});
  }

  fs::create_directories(o.out);
  write_json(fs::path(o.out) / "metrics.json", doc);
  write_text_file(fs::path(o.out) / "metrics.txt", table);
  std::cout << table;
  return 0;
}

// ---------------------------------------------------------------------------
// diagram

int cmd_diagram(const EvalOptions& o, const std::string& only_case) {
  const DatasetManifest manifest = load_manifest(o.manifest);
  const BinningConfig binning = o.binning();
  const ClassSelection selection = o.selection();
  std::vector<std::size_t> cases;
  for (std::size_t k = 0; k < manifest.cases.size(); ++k) {
    if (only_case.empty() || manifest.cases[k].id == only_case) cases.push_back(k);
  }
  if (cases.empty()) throw IoError("no case with id '" + only_case + "' in the manifest");
  const fs::path dir = fs::path(o.out) / "diagrams";
  fs::create_directories(dir);
  std::vector<std::size_t> written(cases.size(), 0);
  parallel_for(cases.size(), o.jobs, [&](std::size_t j) {
    const std::size_t k = cases[j];
    const std::string& id = manifest.cases[k].id;
    const Case c = load_case(manifest, k);
    const ReliabilityCurve curve = finalize(tally_image(c.probs, c.labels, binning));
    const CalibrationReport report =
        calibration_metrics(curve, select_classes(curve.foreground_voxels, selection));
    emit_csv(curve, dir / (id + ".csv"));
    for (std::size_t cls = 0; cls < manifest.num_classes(); ++cls) {
      if (!report.included[cls] || curve.foreground_voxels[cls] == 0) continue;
      const DiagramSpec spec = build_diagram(curve, cls, report, id + " / " + manifest.classes[cls]);
      render_svg(spec, dir / (id + "_" + manifest.classes[cls] + ".svg"));
      ++written[j];
    }
  });
  std::size_t total = 0;
  for (std::size_t w : written) total += w;
  std::cout << "wrote " << total << " diagrams for " << cases.size() << " cases to " << dir.string()
            << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// histogram

int cmd_histogram(const EvalOptions& o, int rows, double gamma) {
  const DatasetManifest manifest = load_manifest(o.manifest);
  const BinningConfig binning = o.binning();
  const ClassSelection selection = o.selection();
  std::vector<ReliabilityCurve> curves(manifest.cases.size(),
                                       ReliabilityCurve(manifest.num_classes(), binning));
  parallel_for(curves.size(), o.jobs, [&](std::size_t k) {
    const Case c = load_case(manifest, k);
    curves[k] = finalize(tally_image(c.probs, c.labels, binning));
  });

  const fs::path dir = fs::path(o.out) / "histograms";
  fs::create_directories(dir);
  std::vector<std::size_t> classes;
  for (std::size_t c = 0; c < manifest.num_classes(); ++c) {
    if (c == selection.background_class && !selection.include_background) continue;
    bool present = false;
    for (const ReliabilityCurve& curve : curves) present |= curve.foreground_voxels[c] > 0;
    if (!present) continue;
    classes.push_back(c);
    const DatasetHistogram h = build_dataset_histogram(curves, c, rows, gamma);
    render_svg(h, dir / ("histogram_" + manifest.classes[c] + ".svg"));
    emit_csv(h, dir / ("histogram_" + manifest.classes[c] + ".csv"));
  }
  if (classes.empty()) throw IoError("no selected class has ground-truth foreground in any case");
  const DatasetHistogram avg = build_dataset_histogram(curves, classes, rows, gamma);
  render_svg(avg, dir / "histogram_average.svg");
  emit_csv(avg, dir / "histogram_average.csv");

  std::size_t diagonal = 0, total = 0;
  for (int m = 0; m < avg.num_bins(); ++m) {
    total += avg.column_total(m);
    diagonal += avg.count(m, histogram_row((m + 0.5) / avg.num_bins(), avg.num_rows()));
  }
  std::cout << "class-averaged histogram: " << total << " populated (image, class, bin) cells, "
            << fixed(total ? 100.0 * static_cast<double>(diagonal) / static_cast<double>(total) : 0.0, 1)
            << "% on the diagonal\n";
  return 0;
}

// ---------------------------------------------------------------------------
// temp-scale

LabeledLogits load_logits_case(const DatasetManifest& manifest, std::size_t k) {
  const ManifestCase& mc = manifest.cases[k];
  if (!mc.logits) throw IoError("case '" + mc.id + "': temperature scaling needs a logits file");
  try {
    return LabeledLogits{load_logits(*mc.logits), load_labels(mc.label, manifest.num_classes())};
  } catch (const std::exception& e) {
    throw IoError("case '" + mc.id + "': " + e.what());
  }
}

int cmd_temp_scale(const EvalOptions& o, const std::string& eval_manifest_path, double lr, int epochs) {
  const DatasetManifest fit_manifest = load_manifest(o.manifest);
  const DatasetManifest eval_manifest =
      eval_manifest_path.empty() ? fit_manifest : load_manifest(eval_manifest_path);
  if (eval_manifest.num_classes() != fit_manifest.num_classes()) {
    throw IoError("fit and evaluation manifests disagree on the class count");
  }
  TemperatureSettings settings;
  settings.learning_rate = lr;
  settings.epochs = epochs;
  const LogitStream stream{fit_manifest.cases.size(),
                           [&](std::size_t k) { return load_logits_case(fit_manifest, k); }};
  const TemperatureFit fit = fit_temperature(stream, settings);

  const fs::path out = o.out;
  const fs::path scaled_dir = out / "scaled";
  fs::create_directories(scaled_dir);
  const std::size_t n = eval_manifest.cases.size();
  std::vector<std::size_t> argmax_changes(n, 0);
  DatasetManifest scaled = eval_manifest;
  auto load_scaled = [&](std::size_t k, double t) {
    LabeledLogits ll = load_logits_case(eval_manifest, k);
    return Case{apply_temperature(ll.logits, t), std::move(ll.labels)};
  };
  const DatasetReports before = evaluate_cases(n, o.jobs, o.binning(), o.selection(),
                                               eval_manifest.num_classes(),
                                               [&](std::size_t k) { return load_scaled(k, 1.0); });
  const DatasetReports after = evaluate_cases(
      n, o.jobs, o.binning(), o.selection(), eval_manifest.num_classes(), [&](std::size_t k) {
        Case c = load_scaled(k, fit.temperature);
        const auto plain = apply_temperature(load_logits_case(eval_manifest, k).logits, 1.0).argmax();
        const auto hard = c.probs.argmax();
        for (std::size_t i = 0; i < hard.size(); ++i) argmax_changes[k] += hard[i] != plain[i];
        const fs::path file = scaled_dir / (eval_manifest.cases[k].id + "_prob.calv");
        save_probabilities(file, c.probs);
        scaled.cases[k].prediction = fs::absolute(file);
        return c;
      });
  for (ManifestCase& mc : scaled.cases) {
    mc.label = fs::absolute(mc.label);
    if (mc.logits) mc.logits = fs::absolute(*mc.logits);
    if (mc.image) mc.image = fs::absolute(*mc.image);
  }
  save_manifest(out / "scaled_manifest.json", scaled);

  std::size_t changed = 0;
  for (std::size_t c : argmax_changes) changed += c;
  json doc;
  doc["temperature"] = fit.temperature;
  doc["settings"] = {{"learning_rate", lr}, {"epochs", epochs}, {"steps", fit.trace.size()}};
  doc["fit_cross_entropy"] = {{"initial", fit.initial_cross_entropy}, {"final", fit.final_cross_entropy}};
  doc["argmax_changes"] = changed;
  doc["config"] = config_json(o);
  doc["before"] = dataset_json(before, eval_manifest, eval_manifest.classes);
  doc["after"] = dataset_json(after, eval_manifest, eval_manifest.classes);
  write_json(out / "temperature.json", doc);

  std::string table = "T = " + fixed(fit.temperature) + "  (CE " + fixed(fit.initial_cross_entropy) +
                      " -> " + fixed(fit.final_cross_entropy) + ", argmax changes " +
                      std::to_string(changed) + ")\n" +
                      report_table({{"macro T=1", &before.macro},
                                    {"micro T=1", &before.micro},
                                    {"macro fit", &after.macro},
                                    {"micro fit", &after.micro}});
  write_text_file(out / "temperature.txt", table);
  std::cout << table;
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check

struct GradCheckRow {
  std::string name;
  int instances = 0;
  double max_error = 0.0;
};

std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double saved = x[k];
    x[k] = saved + h;
    const double up = f(x);
    x[k] = saved - h;
    const double down = f(x);
    x[k] = saved;
    g[k] = (up - down) / (2 * h);
  }
  return g;
}

double relative_error(std::span<const double> a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < b.size(); ++k) {
    diff += (a[k] - b[k]) * (a[k] - b[k]);
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

// Away from kernel kinks and with every contributing |o - e| clear of zero.
bool smooth_point(std::span<const double> x, const LabelVolume& labels, const LossConfig& cfg,
                  std::size_t num_classes) {
  const BinningConfig& b = cfg.binning;
  for (double v : x) {
    if (v < 1e-4 || v > 1 - 1e-4) return false;
    for (int m = 0; m < b.num_bins(); ++m) {
      const double kink = b.kernel() == Kernel::kSoft ? b.centre(m) : b.boundary(m);
      if (std::abs(v - kink) < 1e-4) return false;
    }
  }
  const ProbabilityVolume p(ChannelVolume(num_classes, {labels.num_voxels()}, {x.begin(), x.end()}),
                            ProbabilityKind::kMultiLabel);
  const ReliabilityCurve curve = finalize(tally_image(p, labels, b));
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (int m = 0; m < b.num_bins(); ++m) {
      const BinStats& s = curve.bin(c, m);
      if (!s.empty && std::abs(s.observed - s.expected) < 1e-4) return false;
    }
  }
  return true;
}

int cmd_grad_check(int instances, std::uint64_t seed, int bins, double tolerance, const fs::path& out) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.02, 0.98);
  std::normal_distribution<double> normal(0.0, 1.5);
  const double h = 1e-6;
  auto multilabel = [](std::size_t c, const std::vector<double>& v) {
    return ProbabilityVolume(ChannelVolume(c, {v.size() / c}, v), ProbabilityKind::kMultiLabel);
  };
  auto draw_labels = [&](std::size_t c, std::size_t n) {
    std::vector<std::uint16_t> idx(n);
    for (auto& v : idx) v = static_cast<std::uint16_t>(rng() % c);
    return LabelVolume::from_indices(c, {n}, std::move(idx));
  };

  std::vector<GradCheckRow> rows = {{"hl1_ace"}, {"sl1_ace"}, {"dice_ce"}, {"cross_entropy"},
                                    {"composite"}, {"softmax_chain"}};
  for (int trial = 0; trial < instances; ++trial) {
    for (GradCheckRow& row : rows) {
      for (int attempt = 0; attempt < 10000; ++attempt) {
        const std::size_t c = 2 + rng() % 3;
        const std::size_t n = 8 + rng() % 25;
        const LabelVolume labels = draw_labels(c, n);
        LossConfig cfg;
        cfg.binning = BinningConfig(bins, row.name == "hl1_ace" ? Kernel::kHard : Kernel::kSoft);
        std::vector<double> x(c * n);
        double err = 0.0;
        if (row.name == "softmax_chain") {
          ChannelVolume z(c, {n});
          for (double& v : z.values()) v = normal(rng);
          const ProbabilityVolume p = softmax(z);
          if (!smooth_point(p.field().values(), labels, cfg, c)) continue;
          const CompositeOutput o = composite_loss(p, labels, 1.0, cfg);
          const ChannelVolume g = loss_grad_logits(o.grad_probs, p);
          const std::vector<double> z0(z.values().begin(), z.values().end());
          auto f = [&](const std::vector<double>& zz) {
            return composite_loss(softmax(ChannelVolume(c, {n}, zz)), labels, 1.0, cfg).value;
          };
          err = relative_error(g.values(), central_difference(f, z0, h));
        } else {
          for (double& v : x) v = unit(rng);
          const bool uses_ace = row.name == "hl1_ace" || row.name == "sl1_ace" || row.name == "composite";
          if (uses_ace && !smooth_point(x, labels, cfg, c)) continue;
          std::function<double(const std::vector<double>&)> f;
          ChannelVolume g;
          if (row.name == "dice_ce") {
            g = dice_ce_loss(multilabel(c, x), labels).grad_probs;
            f = [&](const std::vector<double>& v) { return dice_ce_loss(multilabel(c, v), labels).value; };
          } else if (row.name == "cross_entropy") {
            g = cross_entropy_loss(multilabel(c, x), labels).grad_probs;
            f = [&](const std::vector<double>& v) { return cross_entropy_loss(multilabel(c, v), labels).value; };
          } else if (row.name == "composite") {
            g = composite_loss(multilabel(c, x), labels, 1.0, cfg).grad_probs;
            f = [&](const std::vector<double>& v) {
              return composite_loss(multilabel(c, v), labels, 1.0, cfg).value;
            };
          } else {
            g = ace_loss(multilabel(c, x), labels, cfg).grad_probs;
            f = [&](const std::vector<double>& v) {
              return ace_loss_forward(multilabel(c, v), labels, cfg).value;
            };
          }
          err = relative_error(g.values(), central_difference(f, x, h));
        }
        row.max_error = std::max(row.max_error, err);
        ++row.instances;
        break;
      }
    }
  }

  bool ok = true;
  json doc;
  doc["seed"] = seed;
  doc["bins"] = bins;
  doc["step"] = h;
  doc["tolerance"] = tolerance;
  json results = json::array();
  std::ostringstream table;
  table << pad("loss", 16) << pad("instances", 12) << pad("max rel err", 16) << "status\n";
  for (const GradCheckRow& row : rows) {
    const bool pass = row.instances == instances && row.max_error <= tolerance;
    ok &= pass;
    results.push_back({{"loss", row.name},
                       {"instances", row.instances},
                       {"max_relative_error", row.max_error},
                       {"pass", pass}});
    char err[32];
    std::snprintf(err, sizeof(err), "%.3e", row.max_error);
    table << pad(row.name, 16) << pad(std::to_string(row.instances), 12) << pad(err, 16)
          << (pass ? "ok" : "FAIL") << '\n';
  }
  doc["results"] = results;
  fs::create_directories(out);
  write_json(out / "grad_check.json", doc);
  write_text_file(out / "grad_check.txt", table.str());
  std::cout << table.str();
  if (!ok) throw CheckFailed("gradient check failed");
  return 0;
}

// ---------------------------------------------------------------------------
// train-toy and sweep

struct ToyOptions {
  std::string variant = "dsc_ce_sl1ace";
  double lambda = 1.0;
  int bins = BinningConfig::kDefaultBins;
  int epochs = 300;
  double lr = 1.0;
  double max_grad_norm = 2.0;
  std::uint64_t seed = 0;
  double noise = 0.2;
  std::size_t size = 128;
  std::string out = default_out();
};

void add_toy_flags(CLI::App* app, ToyOptions& o) {
  app->add_option("--variant", o.variant, "training loss")
      ->check(CLI::IsMember({"dsc_ce", "ce_only", "dsc_ce_hl1ace", "dsc_ce_sl1ace"}));
  app->add_option("--lambda", o.lambda, "ACE loss weight")->check(CLI::NonNegativeNumber);
  app->add_option("--bins", o.bins, "ACE loss bins")->check(CLI::PositiveNumber);
  app->add_option("--epochs", o.epochs, "training epochs")->check(CLI::PositiveNumber);
  app->add_option("--lr", o.lr, "gradient descent step")->check(CLI::PositiveNumber);
  app->add_option("--max-grad-norm", o.max_grad_norm, "gradient norm clip (0 disables)")
      ->check(CLI::NonNegativeNumber);
  app->add_option("--noise", o.noise, "label noise rate")->check(CLI::Range(0.0, 0.99));
  app->add_option("--size", o.size, "image height and width")->check(CLI::Range(64, 1024));
  app->add_option("--out", o.out, std::string("output directory (default $") + kOutputEnv + ")");
}

harness::SyntheticConfig data_config(const ToyOptions& o) {
  harness::SyntheticConfig cfg;
  cfg.height = cfg.width = o.size;
  const double scale = static_cast<double>(o.size) / 128.0;
  cfg.min_radius *= scale;
  cfg.max_radius *= scale;
  cfg.label_noise = o.noise;
  cfg.seed = o.seed;
  return cfg;
}

harness::TrainConfig train_config(const ToyOptions& o) {
  harness::TrainConfig tc;
  tc.variant = harness::parse_variant(o.variant);
  tc.lambda = o.lambda;
  tc.num_bins = o.bins;
  tc.epochs = o.epochs;
  tc.learning_rate = o.lr;
  tc.max_grad_norm = o.max_grad_norm;
  tc.seed = o.seed;
  return tc;
}

int cmd_train_toy(const ToyOptions& o) {
  const harness::SyntheticConfig dc = data_config(o);
  const harness::SyntheticDataset data = harness::generate_dataset(dc);
  const harness::TrainResult r = harness::train(data, train_config(o));
  const fs::path out = o.out;
  fs::create_directories(out);
  harness::write_split(r.model, data.val, dc, "val", out);
  harness::write_split(r.model, data.test, dc, "test", out);

  const std::vector<std::string> names = {"background", "class_1", "class_2"};
  json doc;
  doc["variant"] = o.variant;
  doc["lambda"] = o.lambda;
  doc["bins"] = o.bins;
  doc["epochs"] = o.epochs;
  doc["learning_rate"] = o.lr;
  doc["seed"] = o.seed;
  doc["label_noise"] = o.noise;
  doc["best_epoch"] = r.best_epoch;
  doc["best_val_dsc"] = r.best_val_dsc;
  doc["test"] = {{"dsc", r.test.dsc},
                 {"boundary_confidence", r.test.boundary_confidence},
                 {"macro", report_json(r.test.macro, names)},
                 {"micro", report_json(r.test.micro, names)}};
  json history = json::array();
  for (const harness::EpochRecord& e : r.history) {
    json rec = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"grad_norm", e.grad_norm}};
    if (e.val_dsc >= 0) rec["val_dsc"] = e.val_dsc;
    history.push_back(std::move(rec));
  }
  doc["history"] = std::move(history);
  write_json(out / "train_report.json", doc);
  const std::string table = o.variant + " (best epoch " + std::to_string(r.best_epoch) + ")\n" +
                            report_table({{"macro", &r.test.macro}, {"micro", &r.test.micro}});
  write_text_file(out / "train_report.txt", table);
  std::cout << table;
  return 0;
}

int cmd_sweep(const ToyOptions& o, const std::string& dimension, std::vector<double> values,
              std::vector<std::uint64_t> seeds, std::size_t jobs) {
  const harness::SweepDimension dim =
      dimension == "bins" ? harness::SweepDimension::kBins : harness::SweepDimension::kLambda;
  if (values.empty()) {
    values = dim == harness::SweepDimension::kBins ? std::vector<double>{5, 10, 20, 50, 100}
                                                   : std::vector<double>{0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 10.0};
  }
  if (dim == harness::SweepDimension::kBins) {
    for (double v : values) {
      if (v < 1 || v != std::floor(v)) throw CLI::ValidationError("--values", "bin counts must be positive integers");
    }
  }
  const harness::SweepResult r =
      harness::sweep(data_config(o), train_config(o), dim, values, seeds, jobs);
  const fs::path out = o.out;
  fs::create_directories(out);
  const std::string stem = "sweep_" + dimension + "_" + o.variant;
  write_text_file(out / (stem + ".csv"), harness::sweep_csv(r));
  write_text_file(out / (stem + "_dsc.svg"), to_svg(harness::sweep_plot(r, true)));
  write_text_file(out / (stem + "_ace.svg"), to_svg(harness::sweep_plot(r, false)));

  std::ostringstream table;
  table << pad(dimension, 10) << pad("DSC", 10) << pad("macro-ACE", 12) << "micro-ACE\n";
  std::vector<double> aces;
  for (double v : values) {
    const auto variant = harness::parse_variant(o.variant);
    const double ace = r.mean(variant, v, &harness::SweepCell::macro_ace);
    aces.push_back(ace);
    char value[32];
    std::snprintf(value, sizeof(value), "%g", v);
    table << pad(value, 10) << pad(fixed(r.mean(variant, v, &harness::SweepCell::dsc)), 10)
          << pad(fixed(ace), 12) << fixed(r.mean(variant, v, &harness::SweepCell::micro_ace)) << '\n';
  }
  if (values.size() > 1) table << "spearman(value, macro-ACE) = " << fixed(harness::spearman(values, aces), 3) << '\n';
  write_text_file(out / (stem + ".txt"), table.str());
  std::cout << table.str();
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"segcal: calibration metrics, diagrams and calibration-aware training for segmentation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  EvalOptions eval;
  auto* metrics = app.add_subcommand("metrics", "per-image, macro and micro calibration reports");
  add_eval_flags(metrics, eval);

  EvalOptions diag_opts;
  std::string diag_case;
  auto* diagram = app.add_subcommand("diagram", "per-case reliability diagrams (SVG + CSV)");
  add_eval_flags(diagram, diag_opts);
  diagram->add_option("--case", diag_case, "only this case id");

  EvalOptions hist_opts;
  int rows = kDefaultHistogramRows;
  double gamma = kDefaultGamma;
  auto* histogram = app.add_subcommand("histogram", "dataset reliability histograms (SVG + CSV)");
  add_eval_flags(histogram, hist_opts);
  histogram->add_option("--rows", rows, "observed-frequency rows")->check(CLI::PositiveNumber);
  histogram->add_option("--gamma", gamma, "display gamma")->check(CLI::PositiveNumber);

  EvalOptions temp_opts;
  std::string eval_manifest;
  TemperatureSettings temp_defaults;
  double temp_lr = temp_defaults.learning_rate;
  int temp_epochs = temp_defaults.epochs;
  auto* temp = app.add_subcommand("temp-scale", "fit a temperature on --manifest, apply and re-evaluate");
  add_eval_flags(temp, temp_opts);
  temp->add_option("--eval-manifest", eval_manifest, "cases to rescale and evaluate (default: --manifest)");
  temp->add_option("--lr", temp_lr, "Adam step size on log T")->check(CLI::PositiveNumber);
  temp->add_option("--epochs", temp_epochs, "passes over the fitting cases")->check(CLI::NonNegativeNumber);

  int instances = 100;
  std::uint64_t grad_seed = 0;
  int grad_bins = 10;
  double tolerance = 1e-5;
  std::string grad_out = default_out();
  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every loss gradient");
  grad->add_option("--instances", instances, "random instances per loss")->check(CLI::PositiveNumber);
  grad->add_option("--seed", grad_seed, "random seed");
  grad->add_option("--bins", grad_bins, "bins for the ACE losses")->check(CLI::PositiveNumber);
  grad->add_option("--tolerance", tolerance, "relative error bound")->check(CLI::PositiveNumber);
  grad->add_option("--out", grad_out, std::string("output directory (default $") + kOutputEnv + ")");

  ToyOptions toy;
  auto* train_toy = app.add_subcommand("train-toy", "train the toy model on synthetic data");
  add_toy_flags(train_toy, toy);
  train_toy->add_option("--seed", toy.seed, "data and initialization seed");

  ToyOptions sweep_opts;
  std::string dimension = "bins";
  std::vector<double> values;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::size_t sweep_jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "bin-count or lambda sensitivity sweep");
  add_toy_flags(sweep, sweep_opts);
  sweep->add_option("--dimension", dimension, "swept setting")->check(CLI::IsMember({"bins", "lambda"}));
  sweep->add_option("--values", values, "values to sweep (comma separated)")->delimiter(',');
  sweep->add_option("--seeds", seeds, "seeds per value (comma separated)")->delimiter(',');
  sweep->add_option("--jobs", sweep_jobs, "parallel training runs")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*metrics) return cmd_metrics(eval);
    if (*diagram) return cmd_diagram(diag_opts, diag_case);
    if (*histogram) return cmd_histogram(hist_opts, rows, gamma);
    if (*temp) return cmd_temp_scale(temp_opts, eval_manifest, temp_lr, temp_epochs);
    if (*grad) return cmd_grad_check(instances, grad_seed, grad_bins, tolerance, grad_out);
    if (*train_toy) return cmd_train_toy(toy);
    if (*sweep) {
      if (seeds.empty()) throw CLI::ValidationError("--seeds", "at least one seed is required");
      return cmd_sweep(sweep_opts, dimension, values, seeds, sweep_jobs);
    }
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int k = 1; k < argc; ++k) args.emplace_back(argv[k]);
  return run(args);
}

}  // namespace segcal::cli
