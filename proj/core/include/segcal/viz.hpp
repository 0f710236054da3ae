#ifndef SEGCAL_VIZ_HPP_
#define SEGCAL_VIZ_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "segcal/reliability.hpp"

namespace segcal {

// Reliability diagram of one class of one image (or of a micro-averaged
// dataset curve).
struct DiagramBin {
  double lower = 0.0;
  double upper = 0.0;
  double expected = 0.0;
  double observed = 0.0;
  double mass = 0.0;
  bool empty = true;
};

struct DiagramSpec {
  std::size_t class_index = 0;
  std::string title;
  std::vector<DiagramBin> bins;
  ClassMetrics metrics;

  int num_bins() const { return static_cast<int>(bins.size()); }
};

// Throws std::invalid_argument when class c has no ground-truth foreground in
// the curve or is out of range.
DiagramSpec build_diagram(const ReliabilityCurve& curve, std::size_t c,
                          const CalibrationReport& report, std::string title = {});

inline constexpr int kDefaultHistogramRows = 20;
inline constexpr double kDefaultGamma = 0.5;

// Per confidence bin, a histogram of per-image observed frequencies.
class DatasetHistogram {
 public:
  DatasetHistogram(int num_bins, int num_rows, double gamma, std::string label);

  int num_bins() const { return num_bins_; }
  int num_rows() const { return num_rows_; }
  double gamma() const { return gamma_; }
  const std::string& label() const { return label_; }

  std::uint64_t count(int m, int row) const { return counts_[index(m, row)]; }
  void add(int m, int row, std::uint64_t k = 1) { counts_[index(m, row)] += k; }
  std::uint64_t column_total(int m) const;

  // (count / column max) ^ gamma; zero for empty columns.
  double intensity(int m, int row) const;

  friend bool operator==(const DatasetHistogram&, const DatasetHistogram&) = default;

 private:
  std::size_t index(int m, int row) const {
    return static_cast<std::size_t>(m) * static_cast<std::size_t>(num_rows_) +
           static_cast<std::size_t>(row);
  }

  int num_bins_;
  int num_rows_;
  double gamma_;
  std::string label_;
  std::vector<std::uint64_t> counts_;
};

// Row of an observed frequency among `num_rows` equal rows of [0, 1]; o = 1
// lands in the top row.
int histogram_row(double observed, int num_rows);

// Histogram of class c over images where c has ground-truth foreground.
// Throws std::invalid_argument for rows < 1, gamma <= 0, an empty list or when
// no image contains class c.
DatasetHistogram build_dataset_histogram(std::span<const ReliabilityCurve> per_image, std::size_t c,
                                         int num_rows = kDefaultHistogramRows,
                                         double gamma = kDefaultGamma);

// Class-averaged variant: counts summed over `classes` before normalization.
DatasetHistogram build_dataset_histogram(std::span<const ReliabilityCurve> per_image,
                                         std::span<const std::size_t> classes,
                                         int num_rows = kDefaultHistogramRows,
                                         double gamma = kDefaultGamma);

std::string to_svg(const DiagramSpec& spec);
std::string to_svg(const DatasetHistogram& histogram);

// Write the SVG; throws std::runtime_error on I/O failure.
void render_svg(const DiagramSpec& spec, const std::filesystem::path& path);
void render_svg(const DatasetHistogram& histogram, const std::filesystem::path& path);

// class,bin,e,o,n,empty -- one row per (class, bin), class-major.
std::string curve_csv(const ReliabilityCurve& curve);
void emit_csv(const ReliabilityCurve& curve, const std::filesystem::path& path);

// class,bin,row,count -- one row per (bin, row); class is the histogram label.
std::string histogram_csv(const DatasetHistogram& histogram);
void emit_csv(const DatasetHistogram& histogram, const std::filesystem::path& path);
DatasetHistogram load_histogram_csv(const std::filesystem::path& path, double gamma = kDefaultGamma);

// Minimal line chart used for sweep figures.
struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  std::vector<PlotSeries> series;
};

std::string to_svg(const LinePlot& plot);

void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace segcal

#endif  // SEGCAL_VIZ_HPP_
