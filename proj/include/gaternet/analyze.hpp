#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gaternet/model.hpp"

namespace gaternet {

// Binary gate vectors collected over an evaluation set.
struct GateLog {
  std::size_t num_samples = 0;
  std::size_t num_gates = 0;            // c
  std::vector<std::uint8_t> gates;      // row-major num_samples x num_gates, 0 or 1
  std::vector<int> labels;              // per sample
  std::vector<GateSlot> layer_map;      // per gate

  std::uint8_t at(std::size_t sample, std::size_t gate) const {
    return gates[sample * num_gates + gate];
  }
  // Entries binary, sizes consistent, layer_map injective.
  void validate() const;
};

// GateLog file:
//   "GNGATES1"                      8-byte magic
//   u64 num_samples, u64 num_gates
//   num_gates x (u32 layer, u32 filter)
//   num_samples x i32 label
//   ceil(num_samples * num_gates / 8) bytes: the row-major bit matrix,
//   bit k stored in byte k / 8 at position k % 8 (LSB first)
// All integers little-endian.
std::string encode_gate_log(const GateLog& log);
GateLog decode_gate_log(std::string_view bytes);
void write_gate_log(const std::filesystem::path& path, const GateLog& log);
GateLog read_gate_log(const std::filesystem::path& path);

enum class GateCategory : std::uint8_t { always_on, always_off, input_dependent };
const char* to_string(GateCategory category);

struct CategoryCounts {
  std::size_t always_on = 0;
  std::size_t always_off = 0;
  std::size_t input_dependent = 0;

  std::size_t total() const { return always_on + always_off + input_dependent; }
};

struct GateTaxonomy {
  std::vector<GateCategory> category;  // per gate
  std::vector<std::size_t> on_count;   // per gate: samples with the gate on
  std::vector<GateSlot> layer_map;
  std::size_t num_samples = 0;
  CategoryCounts overall;
};

GateTaxonomy classify_gates(const GateLog& log);

struct LayerDistributionRow {
  std::size_t layer = 0;
  CategoryCounts counts;
  std::array<double, 3> fraction{};  // always_on, always_off, input_dependent
};

// Per-layer category counts and fractions, in layer order.
std::vector<LayerDistributionRow> layer_distribution(const GateTaxonomy& taxonomy);

// Equal-width bins over [lo, hi]; a value equal to hi lands in the last bin.
struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;

  double bin_width() const { return counts.empty() ? 0.0 : (hi - lo) / double(counts.size()); }
};

Histogram make_histogram(const std::vector<std::size_t>& values, double lo, double hi,
                         std::size_t bins);

struct OnCountStats {
  std::vector<std::size_t> gate_index;  // input-dependent gates only
  std::vector<std::size_t> on_count;
  Histogram histogram;                  // over [0, num_samples]
};

OnCountStats on_count_histogram(const GateLog& log, std::size_t bins = 100);

struct FiredCountStats {
  std::vector<std::size_t> per_sample;
  std::size_t min = 0;
  std::size_t max = 0;
  double mean = 0.0;
  Histogram histogram;  // over [0, num_gates]
};

FiredCountStats fired_count_per_sample(const GateLog& log, std::size_t bins = 100);

struct PcaResult {
  Eigen::MatrixXd projected;             // n x k
  Eigen::MatrixXd components;            // k x d, unit rows
  std::vector<double> explained_ratio;   // k, non-increasing
  std::size_t zero_variance_components = 0;
};

// Principal components from the SVD of the column-centred data. Each
// component is oriented so its largest-magnitude coordinate is positive.
PcaResult pca_reduce(const Eigen::MatrixXd& data, std::size_t k);

struct UsageVectors {
  std::vector<int> labels;
  Eigen::MatrixXd features;
};

// CSV: header "label,pc1,...,pck", then one row per sample.
void export_usage_vectors(const GateLog& log, std::size_t pca_k,
                          const std::filesystem::path& path);
UsageVectors read_usage_vectors(const std::filesystem::path& path);

struct AnalysisOptions {
  std::size_t pca_k = 2;
  std::size_t on_count_bins = 100;
  std::size_t fired_bins = 100;
};

// Writes taxonomy.csv, layer_distribution.csv, on_count_histogram.csv,
// fired_counts.csv, fired_summary.csv, fired_histogram.csv and
// usage_vectors.csv into out_dir.
void write_analysis(const GateLog& log, const std::filesystem::path& out_dir,
                    const AnalysisOptions& options);

}  // namespace gaternet
