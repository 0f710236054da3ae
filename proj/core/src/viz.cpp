#include "segcal/viz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace segcal {
namespace {

std::string num(double v, int precision = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

std::string escape(const std::string& text) {
  std::string out;
  for (char ch : text) {
    switch (ch) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string svg_open(int width, int height) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
         "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         std::to_string(width) + "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " +
         std::to_string(width) + " " + std::to_string(height) + "\">\n"
         "<rect x=\"0\" y=\"0\" width=\"" + std::to_string(width) + "\" height=\"" +
         std::to_string(height) + "\" fill=\"white\"/>\n";
}

std::string text(double x, double y, const std::string& content, int size = 12,
                 const char* anchor = "middle") {
  return "<text x=\"" + num(x, 1) + "\" y=\"" + num(y, 1) + "\" font-family=\"sans-serif\" "
         "font-size=\"" + std::to_string(size) + "\" text-anchor=\"" + anchor + "\">" +
         escape(content) + "</text>\n";
}

std::string line(double x1, double y1, double x2, double y2, const char* stroke,
                 const char* extra = "") {
  return "<line x1=\"" + num(x1, 1) + "\" y1=\"" + num(y1, 1) + "\" x2=\"" + num(x2, 1) +
         "\" y2=\"" + num(y2, 1) + "\" stroke=\"" + stroke + "\"" + extra + "/>\n";
}

std::string rect(double x, double y, double w, double h, const std::string& fill,
                 const char* cls = nullptr, const char* extra = "") {
  std::string out = "<rect";
  if (cls) out += std::string(" class=\"") + cls + "\"";
  out += " x=\"" + num(x, 2) + "\" y=\"" + num(y, 2) + "\" width=\"" + num(w, 2) +
         "\" height=\"" + num(h, 2) + "\" fill=\"" + fill + "\"" + extra + "/>\n";
  return out;
}

std::string grey(double intensity) {
  // intensity 1 -> dark, 0 -> white
  const int level = static_cast<int>(std::lround(255.0 * (1.0 - std::clamp(intensity, 0.0, 1.0))));
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", level, level, level);
  return buf;
}

std::string format_metric(double v) { return num(v, 4); }

}  // namespace

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << content;
  out.flush();
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

DiagramSpec build_diagram(const ReliabilityCurve& curve, std::size_t c,
                          const CalibrationReport& report, std::string title) {
  if (c >= curve.num_classes()) {
    throw std::invalid_argument("class " + std::to_string(c) + " out of range");
  }
  if (curve.foreground_voxels[c] == 0) {
    throw std::invalid_argument("class " + std::to_string(c) +
                                " has no ground-truth foreground; no diagram");
  }
  DiagramSpec spec;
  spec.class_index = c;
  spec.title = title.empty() ? "class " + std::to_string(c) : std::move(title);
  spec.metrics = c < report.per_class.size() ? report.per_class[c] : class_metrics(curve, c);
  const BinningConfig& cfg = curve.config();
  for (int m = 0; m < curve.num_bins(); ++m) {
    const BinStats& b = curve.bin(c, m);
    spec.bins.push_back({cfg.boundary(m), cfg.boundary(m + 1), b.expected, b.observed, b.mass,
                         b.empty});
  }
  return spec;
}

DatasetHistogram::DatasetHistogram(int num_bins, int num_rows, double gamma, std::string label)
    : num_bins_(num_bins), num_rows_(num_rows), gamma_(gamma), label_(std::move(label)) {
  if (num_bins < 1 || num_rows < 1) throw std::invalid_argument("histogram needs bins >= 1 and rows >= 1");
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
  counts_.assign(static_cast<std::size_t>(num_bins) * static_cast<std::size_t>(num_rows), 0);
}

std::uint64_t DatasetHistogram::column_total(int m) const {
  std::uint64_t total = 0;
  for (int r = 0; r < num_rows_; ++r) total += count(m, r);
  return total;
}

double DatasetHistogram::intensity(int m, int row) const {
  std::uint64_t peak = 0;
  for (int r = 0; r < num_rows_; ++r) peak = std::max(peak, count(m, r));
  if (peak == 0) return 0.0;
  return std::pow(static_cast<double>(count(m, row)) / static_cast<double>(peak), gamma_);
}

int histogram_row(double observed, int num_rows) {
  int row = std::clamp(static_cast<int>(observed * num_rows), 0, num_rows - 1);
  while (row + 1 < num_rows && observed >= static_cast<double>(row + 1) / num_rows) ++row;
  while (row > 0 && observed < static_cast<double>(row) / num_rows) --row;
  return row;
}

DatasetHistogram build_dataset_histogram(std::span<const ReliabilityCurve> per_image,
                                         std::span<const std::size_t> classes, int num_rows,
                                         double gamma) {
  if (per_image.empty()) throw std::invalid_argument("dataset histogram needs at least one image");
  if (classes.empty()) throw std::invalid_argument("dataset histogram needs at least one class");
  const int num_bins = per_image.front().num_bins();
  std::string label;
  if (classes.size() == 1) {
    label = std::to_string(classes.front());
  } else {
    label = "mean";
  }
  DatasetHistogram hist(num_bins, num_rows, gamma, label);
  bool any = false;
  for (const ReliabilityCurve& curve : per_image) {
    if (curve.num_bins() != num_bins) {
      throw std::invalid_argument("per-image curves disagree on the bin count");
    }
    for (std::size_t c : classes) {
      if (c >= curve.num_classes()) {
        throw std::invalid_argument("class " + std::to_string(c) + " out of range");
      }
      if (curve.foreground_voxels[c] == 0) continue;
      any = true;
      for (int m = 0; m < num_bins; ++m) {
        const BinStats& b = curve.bin(c, m);
        if (b.empty) continue;
        hist.add(m, histogram_row(b.observed, num_rows));
      }
    }
  }
  if (!any) throw std::invalid_argument("no image contains the requested class");
  return hist;
}

DatasetHistogram build_dataset_histogram(std::span<const ReliabilityCurve> per_image, std::size_t c,
                                         int num_rows, double gamma) {
  const std::size_t classes[] = {c};
  return build_dataset_histogram(per_image, std::span<const std::size_t>(classes), num_rows, gamma);
}

std::string to_svg(const DiagramSpec& spec) {
  constexpr double left = 60, top = 40, plot = 360, gap = 30, counts_h = 100;
  const int width = static_cast<int>(left + plot + 40);
  const int height = static_cast<int>(top + plot + gap + counts_h + 60);
  const double count_top = top + plot + gap;
  std::string svg = svg_open(width, height);
  svg += text(left + plot / 2, 24, spec.title, 14);

  svg += rect(left, top, plot, plot, "none", nullptr, " stroke=\"black\"");
  svg += line(left, top + plot, left + plot, top, "#888888", " stroke-dasharray=\"4 3\"");

  double max_mass = 0.0;
  for (const DiagramBin& b : spec.bins) max_mass = std::max(max_mass, b.mass);

  for (const DiagramBin& b : spec.bins) {
    const double x = left + b.lower * plot;
    const double w = (b.upper - b.lower) * plot;
    if (!b.empty) {
      const double h_obs = b.observed * plot;
      svg += rect(x, top + plot - h_obs, w, h_obs, "#3b6ea8", "accuracy",
                  " stroke=\"white\" stroke-width=\"0.5\"");
      const double lo = std::min(b.observed, b.expected) * plot;
      const double hi = std::max(b.observed, b.expected) * plot;
      svg += rect(x, top + plot - hi, w, hi - lo, "#d9534f", "gap", " fill-opacity=\"0.45\"");
    }
    const double h_count = max_mass > 0.0 ? b.mass / max_mass * counts_h : 0.0;
    svg += rect(x, count_top + counts_h - h_count, w, h_count, "#777777", "count",
                " stroke=\"white\" stroke-width=\"0.5\"");
  }
  svg += rect(left, count_top, plot, counts_h, "none", nullptr, " stroke=\"black\"");

  for (int k = 0; k <= 4; ++k) {
    const double v = k / 4.0;
    svg += text(left + v * plot, top + plot + 14, num(v, 2), 10);
    svg += text(left - 6, top + plot - v * plot + 4, num(v, 2), 10, "end");
  }
  svg += text(left + plot / 2, count_top + counts_h + 30, "predicted foreground probability");
  svg += text(16, top + plot / 2, "observed frequency", 12, "middle");
  svg += text(left + 8, top + 18, "ACE " + format_metric(spec.metrics.ace), 11, "start");
  svg += text(left + 8, top + 32, "ECE " + format_metric(spec.metrics.ece), 11, "start");
  svg += text(left + 8, top + 46, "MCE " + format_metric(spec.metrics.mce), 11, "start");
  svg += "</svg>\n";
  return svg;
}

std::string to_svg(const DatasetHistogram& histogram) {
  constexpr double left = 60, top = 40, plot = 400;
  const int width = static_cast<int>(left + plot + 40);
  const int height = static_cast<int>(top + plot + 60);
  const double cw = plot / histogram.num_bins();
  const double ch = plot / histogram.num_rows();
  std::string svg = svg_open(width, height);
  svg += text(left + plot / 2, 24, "dataset reliability histogram (" + histogram.label() + ")", 14);
  for (int m = 0; m < histogram.num_bins(); ++m) {
    for (int r = 0; r < histogram.num_rows(); ++r) {
      const double y = top + plot - (r + 1) * ch;
      svg += rect(left + m * cw, y, cw, ch, grey(histogram.intensity(m, r)), "cell");
    }
  }
  svg += rect(left, top, plot, plot, "none", nullptr, " stroke=\"black\"");
  svg += line(left, top + plot, left + plot, top, "#d9534f", " stroke-dasharray=\"4 3\"");
  for (int k = 0; k <= 4; ++k) {
    const double v = k / 4.0;
    svg += text(left + v * plot, top + plot + 14, num(v, 2), 10);
    svg += text(left - 6, top + plot - v * plot + 4, num(v, 2), 10, "end");
  }
  svg += text(left + plot / 2, top + plot + 36, "predicted foreground probability");
  svg += "</svg>\n";
  return svg;
}

void render_svg(const DiagramSpec& spec, const std::filesystem::path& path) {
  write_text_file(path, to_svg(spec));
}

void render_svg(const DatasetHistogram& histogram, const std::filesystem::path& path) {
  write_text_file(path, to_svg(histogram));
}

std::string curve_csv(const ReliabilityCurve& curve) {
  std::ostringstream out;
  out << "class,bin,e,o,n,empty\n";
  char buf[160];
  for (std::size_t c = 0; c < curve.num_classes(); ++c) {
    for (int m = 0; m < curve.num_bins(); ++m) {
      const BinStats& b = curve.bin(c, m);
      std::snprintf(buf, sizeof(buf), "%zu,%d,%.17g,%.17g,%.17g,%d\n", c, m, b.expected,
                    b.observed, b.mass, b.empty ? 1 : 0);
      out << buf;
    }
  }
  return out.str();
}

void emit_csv(const ReliabilityCurve& curve, const std::filesystem::path& path) {
  write_text_file(path, curve_csv(curve));
}

std::string histogram_csv(const DatasetHistogram& histogram) {
  std::ostringstream out;
  out << "class,bin,row,count\n";
  for (int m = 0; m < histogram.num_bins(); ++m) {
    for (int r = 0; r < histogram.num_rows(); ++r) {
      out << histogram.label() << ',' << m << ',' << r << ',' << histogram.count(m, r) << '\n';
    }
  }
  return out.str();
}

void emit_csv(const DatasetHistogram& histogram, const std::filesystem::path& path) {
  write_text_file(path, histogram_csv(histogram));
}

DatasetHistogram load_histogram_csv(const std::filesystem::path& path, double gamma) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line_text;
  if (!std::getline(in, line_text) || line_text != "class,bin,row,count") {
    throw std::runtime_error(path.string() + ": not a histogram CSV");
  }
  struct Row {
    int m, r;
    std::uint64_t count;
  };
  std::vector<Row> rows;
  std::string label;
  int num_bins = 0, num_rows = 0;
  while (std::getline(in, line_text)) {
    if (line_text.empty()) continue;
    std::istringstream fields(line_text);
    std::string cls, m, r, count;
    if (!std::getline(fields, cls, ',') || !std::getline(fields, m, ',') ||
        !std::getline(fields, r, ',') || !std::getline(fields, count)) {
      throw std::runtime_error(path.string() + ": malformed row '" + line_text + "'");
    }
    label = cls;
    Row row{std::stoi(m), std::stoi(r), std::stoull(count)};
    num_bins = std::max(num_bins, row.m + 1);
    num_rows = std::max(num_rows, row.r + 1);
    rows.push_back(row);
  }
  DatasetHistogram hist(num_bins, num_rows, gamma, label);
  for (const Row& row : rows) hist.add(row.m, row.r, row.count);
  return hist;
}

std::string to_svg(const LinePlot& plot) {
  constexpr double left = 70, top = 40, w = 420, h = 280;
  const int width = static_cast<int>(left + w + 160);
  const int height = static_cast<int>(top + h + 60);
  double x_min = INFINITY, x_max = -INFINITY, y_min = INFINITY, y_max = -INFINITY;
  auto tx = [&](double x) { return plot.log_x ? std::log10(x) : x; };
  for (const PlotSeries& s : plot.series) {
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      x_min = std::min(x_min, tx(s.x[k]));
      x_max = std::max(x_max, tx(s.x[k]));
      y_min = std::min(y_min, s.y[k]);
      y_max = std::max(y_max, s.y[k]);
    }
  }
  if (!std::isfinite(x_min)) x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  if (x_max == x_min) x_max = x_min + 1;
  if (y_max == y_min) y_max = y_min + 1;
  const double pad = 0.05 * (y_max - y_min);
  y_min -= pad;
  y_max += pad;
  auto px = [&](double x) { return left + (tx(x) - x_min) / (x_max - x_min) * w; };
  auto py = [&](double y) { return top + h - (y - y_min) / (y_max - y_min) * h; };

  static const char* const kColors[] = {"#3b6ea8", "#d9534f", "#5cb85c", "#f0ad4e", "#6f42c1", "#333333"};
  std::string svg = svg_open(width, height);
  svg += text(left + w / 2, 24, plot.title, 14);
  svg += rect(left, top, w, h, "none", nullptr, " stroke=\"black\"");
  for (int k = 0; k <= 4; ++k) {
    const double yv = y_min + k * (y_max - y_min) / 4;
    svg += text(left - 6, py(yv) + 4, num(yv, 3), 10, "end");
  }
  std::size_t idx = 0;
  for (const PlotSeries& s : plot.series) {
    const char* color = kColors[idx % std::size(kColors)];
    std::string points;
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      points += num(px(s.x[k]), 2) + "," + num(py(s.y[k]), 2) + " ";
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" +
           points + "\"/>\n";
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      svg += "<circle cx=\"" + num(px(s.x[k]), 2) + "\" cy=\"" + num(py(s.y[k]), 2) +
             "\" r=\"3\" fill=\"" + color + "\"/>\n";
    }
    svg += text(left + w + 12, top + 16 + 16 * static_cast<double>(idx), s.name, 11, "start");
    svg += line(left + w + 2, top + 12 + 16 * static_cast<double>(idx), left + w + 10,
                top + 12 + 16 * static_cast<double>(idx), color, " stroke-width=\"2\"");
    ++idx;
  }
  if (!plot.series.empty()) {
    for (double xv : plot.series.front().x) {
      svg += text(px(xv), top + h + 14, num(xv, xv < 1 ? 2 : 0), 10);
    }
  }
  svg += text(left + w / 2, top + h + 36, plot.x_label);
  svg += text(18, top + h / 2, plot.y_label, 12);
  svg += "</svg>\n";
  return svg;
}

}  // namespace segcal
