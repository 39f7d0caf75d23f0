#include "gaternet/analyze.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "gaternet/errors.hpp"
#include "gaternet/io.hpp"

namespace gaternet {

namespace {
constexpr std::string_view kGateLogMagic = "GNGATES1";

std::string fmt_double(double v) {
  std::ostringstream out;
  out.precision(10);
  out << v;
  return out.str();
}
}  // namespace

void GateLog::validate() const {
  if (gates.size() != num_samples * num_gates) {
    throw FormatError("gate log: matrix has " + std::to_string(gates.size()) + " entries, expected " +
                      std::to_string(num_samples) + " x " + std::to_string(num_gates));
  }
  if (labels.size() != num_samples) throw FormatError("gate log: label count does not match samples");
  if (layer_map.size() != num_gates) throw FormatError("gate log: layer map does not cover every gate");
  for (std::uint8_t g : gates)
    if (g > 1) throw FormatError("gate log: non-binary gate value " + std::to_string(g));
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& s : layer_map) {
    if (!seen.insert({s.layer, s.filter}).second) {
      throw FormatError("gate log: (layer " + std::to_string(s.layer) + ", filter " +
                        std::to_string(s.filter) + ") mapped twice");
    }
  }
}

// ---------------------------------------------------------------------------
// GateLog I/O

std::string encode_gate_log(const GateLog& log) {
  log.validate();
  ByteWriter w;
  w.bytes(kGateLogMagic);
  w.u64(log.num_samples);
  w.u64(log.num_gates);
  for (const auto& s : log.layer_map) {
    w.u32(static_cast<std::uint32_t>(s.layer));
    w.u32(static_cast<std::uint32_t>(s.filter));
  }
  for (int label : log.labels) w.i32(label);
  const std::size_t bits = log.gates.size();
  std::string packed((bits + 7) / 8, '\0');
  for (std::size_t k = 0; k < bits; ++k)
    if (log.gates[k]) packed[k / 8] = static_cast<char>(packed[k / 8] | (1u << (k % 8)));
  w.bytes(packed);
  return w.take();
}

GateLog decode_gate_log(std::string_view bytes) {
  ByteReader r(bytes, "gate log");
  if (r.bytes(kGateLogMagic.size()) != kGateLogMagic) throw FormatError("gate log: bad magic");
  GateLog log;
  log.num_samples = r.u64();
  log.num_gates = r.u64();
  const std::size_t header = 8 * log.num_gates + 4 * log.num_samples;
  const std::size_t body = (log.num_samples * log.num_gates + 7) / 8;
  if (r.remaining() != header + body) {
    throw FormatError("gate log: expected " + std::to_string(header + body) +
                      " bytes after the header, found " + std::to_string(r.remaining()));
  }
  log.layer_map.resize(log.num_gates);
  for (auto& s : log.layer_map) {
    s.layer = r.u32();
    s.filter = r.u32();
  }
  log.labels.resize(log.num_samples);
  for (auto& label : log.labels) label = r.i32();
  const std::string_view packed = r.bytes(body);
  log.gates.resize(log.num_samples * log.num_gates);
  for (std::size_t k = 0; k < log.gates.size(); ++k)
    log.gates[k] = (static_cast<unsigned char>(packed[k / 8]) >> (k % 8)) & 1u;
  log.validate();
  return log;
}

void write_gate_log(const std::filesystem::path& path, const GateLog& log) {
  atomic_write_file(path, encode_gate_log(log));
}

GateLog read_gate_log(const std::filesystem::path& path) {
  try {
    return decode_gate_log(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Taxonomy

const char* to_string(GateCategory category) {
  switch (category) {
    case GateCategory::always_on: return "always_on";
    case GateCategory::always_off: return "always_off";
    case GateCategory::input_dependent: return "input_dependent";
  }
  return "?";
}

GateTaxonomy classify_gates(const GateLog& log) {
  log.validate();
  if (log.num_samples == 0) throw std::invalid_argument("classify_gates: empty gate log");
  GateTaxonomy tax;
  tax.num_samples = log.num_samples;
  tax.layer_map = log.layer_map;
  tax.on_count.assign(log.num_gates, 0);
  for (std::size_t s = 0; s < log.num_samples; ++s)
    for (std::size_t j = 0; j < log.num_gates; ++j) tax.on_count[j] += log.at(s, j);
  tax.category.resize(log.num_gates);
  for (std::size_t j = 0; j < log.num_gates; ++j) {
    GateCategory cat = GateCategory::input_dependent;
    if (tax.on_count[j] == log.num_samples) cat = GateCategory::always_on;
    else if (tax.on_count[j] == 0) cat = GateCategory::always_off;
    tax.category[j] = cat;
    switch (cat) {
      case GateCategory::always_on: ++tax.overall.always_on; break;
      case GateCategory::always_off: ++tax.overall.always_off; break;
      case GateCategory::input_dependent: ++tax.overall.input_dependent; break;
    }
  }
  return tax;
}

std::vector<LayerDistributionRow> layer_distribution(const GateTaxonomy& taxonomy) {
  std::map<std::size_t, CategoryCounts> per_layer;
  for (std::size_t j = 0; j < taxonomy.category.size(); ++j) {
    CategoryCounts& c = per_layer[taxonomy.layer_map.at(j).layer];
    switch (taxonomy.category[j]) {
      case GateCategory::always_on: ++c.always_on; break;
      case GateCategory::always_off: ++c.always_off; break;
      case GateCategory::input_dependent: ++c.input_dependent; break;
    }
  }
  std::vector<LayerDistributionRow> rows;
  for (const auto& [layer, counts] : per_layer) {
    LayerDistributionRow row;
    row.layer = layer;
    row.counts = counts;
    const double total = static_cast<double>(counts.total());
    row.fraction = {counts.always_on / total, counts.always_off / total,
                    counts.input_dependent / total};
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Histograms

Histogram make_histogram(const std::vector<std::size_t>& values, double lo, double hi,
                         std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("histogram needs at least one bin");
  if (!(hi > lo)) hi = lo + 1.0;
  Histogram h{lo, hi, std::vector<std::size_t>(bins, 0)};
  for (std::size_t v : values) {
    const double t = (static_cast<double>(v) - lo) / (hi - lo);
    std::size_t bin = t <= 0.0 ? 0 : static_cast<std::size_t>(t * static_cast<double>(bins));
    h.counts[std::min(bin, bins - 1)]++;
  }
  return h;
}

OnCountStats on_count_histogram(const GateLog& log, std::size_t bins) {
  const GateTaxonomy tax = classify_gates(log);
  OnCountStats stats;
  for (std::size_t j = 0; j < tax.category.size(); ++j) {
    if (tax.category[j] != GateCategory::input_dependent) continue;
    stats.gate_index.push_back(j);
    stats.on_count.push_back(tax.on_count[j]);
  }
  stats.histogram = make_histogram(stats.on_count, 0.0, static_cast<double>(log.num_samples), bins);
  return stats;
}

FiredCountStats fired_count_per_sample(const GateLog& log, std::size_t bins) {
  log.validate();
  FiredCountStats stats;
  stats.per_sample.assign(log.num_samples, 0);
  std::size_t total = 0;
  for (std::size_t s = 0; s < log.num_samples; ++s) {
    for (std::size_t j = 0; j < log.num_gates; ++j) stats.per_sample[s] += log.at(s, j);
    total += stats.per_sample[s];
  }
  if (log.num_samples > 0) {
    stats.min = *std::min_element(stats.per_sample.begin(), stats.per_sample.end());
    stats.max = *std::max_element(stats.per_sample.begin(), stats.per_sample.end());
    stats.mean = static_cast<double>(total) / static_cast<double>(log.num_samples);
  }
  stats.histogram = make_histogram(stats.per_sample, 0.0, static_cast<double>(log.num_gates), bins);
  return stats;
}

// ---------------------------------------------------------------------------
// PCA

PcaResult pca_reduce(const Eigen::MatrixXd& data, std::size_t k) {
  const auto n = static_cast<std::size_t>(data.rows());
  const auto d = static_cast<std::size_t>(data.cols());
  if (k == 0 || k > std::min(n, d)) {
    throw std::invalid_argument("pca_reduce: k = " + std::to_string(k) + " must be in [1, " +
                                std::to_string(std::min(n, d)) + "]");
  }
  const Eigen::RowVectorXd mean = data.colwise().mean();
  const Eigen::MatrixXd centred = data.rowwise() - mean;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centred, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double total = s.squaredNorm();

  PcaResult result;
  result.components.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
  result.explained_ratio.resize(k);
  const double tol = (s.size() ? s(0) : 0.0) * 1e-12 * static_cast<double>(std::max(n, d));
  for (std::size_t i = 0; i < k; ++i) {
    const auto idx = static_cast<Eigen::Index>(i);
    Eigen::VectorXd v = svd.matrixV().col(idx);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    result.components.row(idx) = v.transpose();
    const double si = idx < s.size() ? s(idx) : 0.0;
    result.explained_ratio[i] = total > 0.0 ? si * si / total : 0.0;
    if (si <= tol) ++result.zero_variance_components;
  }
  result.projected = centred * result.components.transpose();
  return result;
}

void export_usage_vectors(const GateLog& log, std::size_t pca_k,
                          const std::filesystem::path& path) {
  log.validate();
  Eigen::MatrixXd data(static_cast<Eigen::Index>(log.num_samples),
                       static_cast<Eigen::Index>(log.num_gates));
  for (std::size_t s = 0; s < log.num_samples; ++s)
    for (std::size_t j = 0; j < log.num_gates; ++j)
      data(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j)) = log.at(s, j);
  const PcaResult pca = pca_reduce(data, pca_k);
  std::ostringstream out;
  out << "label";
  for (std::size_t i = 0; i < pca_k; ++i) out << ",pc" << (i + 1);
  out << '\n';
  out.precision(9);
  for (std::size_t s = 0; s < log.num_samples; ++s) {
    out << log.labels[s];
    for (std::size_t i = 0; i < pca_k; ++i)
      out << ',' << pca.projected(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(i));
    out << '\n';
  }
  atomic_write_file(path, out.str());
}

UsageVectors read_usage_vectors(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty usage-vector file");
  const std::size_t k = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  std::vector<int> labels;
  std::vector<double> values;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(fields, cell, ',')) cells.push_back(cell);
    if (cells.size() != k + 1) {
      throw FormatError(path.string() + ": row " + std::to_string(row) + " has " +
                        std::to_string(cells.size()) + " fields, expected " + std::to_string(k + 1));
    }
    labels.push_back(std::stoi(cells[0]));
    for (std::size_t i = 1; i <= k; ++i) values.push_back(std::stod(cells[i]));
  }
  UsageVectors uv;
  uv.labels = std::move(labels);
  uv.features.resize(static_cast<Eigen::Index>(uv.labels.size()), static_cast<Eigen::Index>(k));
  for (std::size_t r = 0; r < uv.labels.size(); ++r)
    for (std::size_t i = 0; i < k; ++i)
      uv.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = values[r * k + i];
  return uv;
}

// ---------------------------------------------------------------------------
// Report files

void write_analysis(const GateLog& log, const std::filesystem::path& out_dir,
                    const AnalysisOptions& options) {
  const GateTaxonomy tax = classify_gates(log);
  {
    std::ostringstream out;
    out << "gate,layer,filter,category,on_count\n";
    for (std::size_t j = 0; j < log.num_gates; ++j) {
      out << j << ',' << tax.layer_map[j].layer << ',' << tax.layer_map[j].filter << ','
          << to_string(tax.category[j]) << ',' << tax.on_count[j] << '\n';
    }
    atomic_write_file(out_dir / "taxonomy.csv", out.str());
  }
  {
    std::ostringstream out;
    out << "layer,always_on,always_off,input_dependent,frac_always_on,frac_always_off,"
           "frac_input_dependent\n";
    for (const auto& row : layer_distribution(tax)) {
      out << row.layer << ',' << row.counts.always_on << ',' << row.counts.always_off << ','
          << row.counts.input_dependent << ',' << fmt_double(row.fraction[0]) << ','
          << fmt_double(row.fraction[1]) << ',' << fmt_double(row.fraction[2]) << '\n';
    }
    atomic_write_file(out_dir / "layer_distribution.csv", out.str());
  }
  auto write_hist = [&](const Histogram& h, const std::string& name) {
    std::ostringstream out;
    out << "bin,lo,hi,count\n";
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
      out << b << ',' << fmt_double(h.lo + h.bin_width() * double(b)) << ','
          << fmt_double(h.lo + h.bin_width() * double(b + 1)) << ',' << h.counts[b] << '\n';
    }
    atomic_write_file(out_dir / name, out.str());
  };
  write_hist(on_count_histogram(log, options.on_count_bins).histogram, "on_count_histogram.csv");
  const FiredCountStats fired = fired_count_per_sample(log, options.fired_bins);
  {
    std::ostringstream out;
    out << "sample,label,fired\n";
    for (std::size_t s = 0; s < log.num_samples; ++s)
      out << s << ',' << log.labels[s] << ',' << fired.per_sample[s] << '\n';
    atomic_write_file(out_dir / "fired_counts.csv", out.str());
    std::ostringstream summary;
    summary << "min,max,mean\n" << fired.min << ',' << fired.max << ',' << fmt_double(fired.mean) << '\n';
    atomic_write_file(out_dir / "fired_summary.csv", summary.str());
  }
  write_hist(fired.histogram, "fired_histogram.csv");
  const std::size_t k = std::min({options.pca_k, log.num_samples, log.num_gates});
  if (k > 0) export_usage_vectors(log, k, out_dir / "usage_vectors.csv");
}

}  // namespace gaternet
