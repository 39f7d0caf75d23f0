#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "gaternet/analyze.hpp"
#include "gaternet/errors.hpp"
#include "gaternet/io.hpp"
#include "support.hpp"

using namespace gaternet;
using namespace gaternet::testing;

namespace fs = std::filesystem;

namespace {

GateLog log_from_columns(const std::vector<std::vector<std::uint8_t>>& columns) {
  GateLog log;
  log.num_gates = columns.size();
  log.num_samples = columns.empty() ? 0 : columns[0].size();
  log.gates.resize(log.num_samples * log.num_gates);
  for (std::size_t j = 0; j < log.num_gates; ++j)
    for (std::size_t i = 0; i < log.num_samples; ++i) log.gates[i * log.num_gates + j] = columns[j][i];
  log.labels.assign(log.num_samples, 0);
  for (std::size_t j = 0; j < log.num_gates; ++j) log.layer_map.push_back({0, j});
  return log;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gaternet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::size_t total(const Histogram& h) { return std::accumulate(h.counts.begin(), h.counts.end(), std::size_t(0)); }

}  // namespace

TEST_SUITE("analyze") {

TEST_CASE("taxonomy of hand-made columns") {
  const GateLog log = log_from_columns({{1, 1}, {0, 0}, {1, 0}});
  const GateTaxonomy t = classify_gates(log);
  CHECK(t.category == std::vector<GateCategory>{GateCategory::always_on, GateCategory::always_off,
                                                GateCategory::input_dependent});
  CHECK(t.on_count == std::vector<std::size_t>{2, 0, 1});
  CHECK(t.overall.total() == 3);

  const GateTaxonomy single = classify_gates(log_from_columns({{1}, {0}, {1}}));
  CHECK(single.overall.input_dependent == 0);
  CHECK(single.overall.always_on == 2);

  CHECK_THROWS_AS(classify_gates(GateLog{}), std::invalid_argument);
}

TEST_CASE("taxonomy matches a brute-force scan and ignores sample order") {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    GateLog log = random_gate_log(100, 50, rng);
    const GateTaxonomy t = classify_gates(log);
    CHECK(t.overall.total() == 50);
    for (std::size_t j = 0; j < 50; ++j) {
      bool any_on = false, any_off = false;
      std::size_t on = 0;
      for (std::size_t i = 0; i < 100; ++i) {
        any_on |= log.at(i, j) == 1;
        any_off |= log.at(i, j) == 0;
        on += log.at(i, j);
      }
      const GateCategory want = any_on && any_off ? GateCategory::input_dependent
                                : any_on          ? GateCategory::always_on
                                                  : GateCategory::always_off;
      CHECK(t.category[j] == want);
      CHECK(t.on_count[j] == on);
    }

    // Reverse and rotate the rows.
    GateLog shuffled = log;
    for (std::size_t i = 0; i < 100; ++i) {
      const std::size_t src = (99 - i + 37) % 100;
      std::copy_n(log.gates.begin() + src * 50, 50, shuffled.gates.begin() + i * 50);
    }
    CHECK(classify_gates(shuffled).category == t.category);
  }
}

TEST_CASE("layer distribution") {
  GateLog one = log_from_columns({{1, 1}, {1, 1}, {1, 1}});
  const auto rows = layer_distribution(classify_gates(one));
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].fraction == std::array<double, 3>{1.0, 0.0, 0.0});

  Rng rng(2);
  const GateLog log = random_gate_log(40, 23, rng);
  std::size_t sum = 0;
  for (const auto& r : layer_distribution(classify_gates(log))) {
    CHECK(std::abs(r.fraction[0] + r.fraction[1] + r.fraction[2] - 1.0) < 1e-9);
    sum += r.counts.total();
  }
  CHECK(sum == 23);
}

TEST_CASE("histograms") {
  const Histogram h = make_histogram({0, 5, 9, 10, 10}, 0.0, 10.0, 5);
  CHECK(h.counts == std::vector<std::size_t>{1, 0, 1, 0, 3});
  CHECK(h.bin_width() == 2.0);
  CHECK_THROWS_AS(make_histogram({1}, 0.0, 1.0, 0), std::invalid_argument);

  // A gate on for a single sample is still input-dependent.
  const GateLog log = log_from_columns({{0, 1, 0, 0}, {1, 1, 1, 1}, {1, 0, 1, 1}});
  const OnCountStats s = on_count_histogram(log, 4);
  CHECK(s.gate_index == std::vector<std::size_t>{0, 2});
  CHECK(s.on_count == std::vector<std::size_t>{1, 3});
  CHECK(total(s.histogram) == 2);

  const OnCountStats none = on_count_histogram(log_from_columns({{1, 1}, {0, 0}}), 10);
  CHECK(none.gate_index.empty());
  CHECK(total(none.histogram) == 0);

  Rng rng(3);
  const GateLog r = random_gate_log(30, 12, rng);
  const OnCountStats rs = on_count_histogram(r);
  for (std::size_t k = 0; k < rs.gate_index.size(); ++k) {
    std::size_t col = 0;
    for (std::size_t i = 0; i < 30; ++i) col += r.at(i, rs.gate_index[k]);
    CHECK(rs.on_count[k] == col);
  }
}

TEST_CASE("fired counts per sample") {
  GateLog ones = log_from_columns({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}});
  const FiredCountStats f = fired_count_per_sample(ones);
  CHECK(f.per_sample == std::vector<std::size_t>{4, 4, 4});
  CHECK(f.min == 4);
  CHECK(f.max == 4);
  CHECK(f.mean == 4.0);

  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const GateLog log = random_gate_log(37, 29, rng);
    const FiredCountStats s = fired_count_per_sample(log, 7);
    std::size_t all = 0;
    for (std::size_t i = 0; i < 37; ++i) {
      std::size_t row = 0;
      for (std::size_t j = 0; j < 29; ++j) row += log.at(i, j);
      CHECK(s.per_sample[i] == row);
      all += row;
    }
    CHECK(s.mean * 37.0 == double(all));
    CHECK(total(s.histogram) == 37);
  }
}

TEST_CASE("pca on data along one axis") {
  Eigen::MatrixXd d(5, 3);
  d << 1, 0, 0, 2, 0, 0, -3, 0, 0, 4, 0, 0, 0.5, 0, 0;
  const PcaResult r = pca_reduce(d, 2);
  CHECK(r.explained_ratio[0] == doctest::Approx(1.0));
  CHECK(r.explained_ratio[1] == doctest::Approx(0.0));
  CHECK(r.zero_variance_components == 1);
  CHECK(r.components(0, 0) == doctest::Approx(1.0));
  CHECK_THROWS_AS(pca_reduce(d, 4), std::invalid_argument);
  CHECK_THROWS_AS(pca_reduce(d, 0), std::invalid_argument);
}

TEST_CASE("pca with all components reconstructs the centred data") {
  Rng rng(5);
  Eigen::MatrixXd d(12, 4);
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    for (Eigen::Index j = 0; j < d.cols(); ++j) d(i, j) = rng.normal() * double(j + 1);
  const PcaResult r = pca_reduce(d, 4);
  const Eigen::MatrixXd centred = d.rowwise() - d.colwise().mean();
  CHECK((r.projected * r.components - centred).cwiseAbs().maxCoeff() < 1e-6);
  double sum = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    if (i) CHECK(r.explained_ratio[i] <= r.explained_ratio[i - 1]);
    sum += r.explained_ratio[i];
    Eigen::Index arg;
    r.components.row(Eigen::Index(i)).cwiseAbs().maxCoeff(&arg);
    CHECK(r.components(Eigen::Index(i), arg) > 0.0);
  }
  CHECK(sum <= 1.0 + 1e-9);
  CHECK(r.zero_variance_components == 0);
}

TEST_CASE("first component aligns with the analytic principal axis") {
  // Covariance [[3, 1], [1, 2]]: principal eigenvector angle
  // 0.5 * atan2(2 * 1, 3 - 2) from the x axis.
  const double a = 3.0, b = 1.0, c = 2.0;
  const double theta = 0.5 * std::atan2(2.0 * b, a - c);
  Eigen::Matrix2d cov;
  cov << a, b, b, c;
  const Eigen::Matrix2d chol = cov.llt().matrixL();
  Rng rng(6);
  Eigen::MatrixXd d(20000, 2);
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const Eigen::Vector2d z(rng.normal(), rng.normal());
    d.row(i) = (chol * z).transpose();
  }
  const PcaResult r = pca_reduce(d, 2);
  const double angle = axis_angle_deg(r.components(0, 0), r.components(0, 1), std::cos(theta), std::sin(theta));
  CAPTURE(angle);
  CHECK(angle < 1.0);
}

TEST_CASE("usage vectors round-trip through CSV") {
  Rng rng(7);
  GateLog log = random_gate_log(25, 16, rng);
  const fs::path dir = scratch_dir("usage");
  export_usage_vectors(log, 3, dir / "u.csv");
  const UsageVectors uv = read_usage_vectors(dir / "u.csv");
  CHECK(uv.labels == log.labels);
  REQUIRE(uv.features.rows() == 25);
  REQUIRE(uv.features.cols() == 3);

  Eigen::MatrixXd data(25, 16);
  for (std::size_t i = 0; i < 25; ++i)
    for (std::size_t j = 0; j < 16; ++j) data(Eigen::Index(i), Eigen::Index(j)) = log.at(i, j);
  const PcaResult r = pca_reduce(data, 3);
  CHECK((uv.features - r.projected).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(read_file(dir / "u.csv").rfind("label,pc1,pc2,pc3\n", 0) == 0);
  CHECK_THROWS_AS(export_usage_vectors(log, 3, "/proc/nonexistent/dir/u.csv"), IoError);
}

TEST_CASE("gate log codec") {
  Rng rng(8);
  for (std::size_t c : {1, 7, 8, 13}) {
    const GateLog log = random_gate_log(11, c, rng);
    const std::string bytes = encode_gate_log(log);
    CHECK(bytes.size() == 8 + 16 + 8 * c + 4 * 11 + (11 * c + 7) / 8);
    const GateLog back = decode_gate_log(bytes);
    CHECK(back.gates == log.gates);
    CHECK(back.labels == log.labels);
    CHECK(back.layer_map == log.layer_map);
    CHECK_THROWS_AS(decode_gate_log(bytes.substr(0, bytes.size() - 1)), FormatError);
    CHECK_THROWS_AS(decode_gate_log("XXXXXXXX" + bytes.substr(8)), FormatError);
  }
  const GateLog log = random_gate_log(5, 4, rng);
  const fs::path dir = scratch_dir("gatelog");
  write_gate_log(dir / "g.bin", log);
  CHECK(read_gate_log(dir / "g.bin").gates == log.gates);

  GateLog bad = log;
  bad.gates[3] = 2;
  CHECK_THROWS_AS(bad.validate(), FormatError);
  bad = log;
  bad.layer_map[1] = bad.layer_map[0];
  CHECK_THROWS_AS(bad.validate(), FormatError);
}

TEST_CASE("write_analysis emits every report") {
  Rng rng(9);
  const GateLog log = random_gate_log(20, 10, rng);
  const fs::path dir = scratch_dir("report");
  write_analysis(log, dir, {});
  for (const char* f : {"taxonomy.csv", "layer_distribution.csv", "on_count_histogram.csv", "fired_counts.csv",
                        "fired_summary.csv", "fired_histogram.csv", "usage_vectors.csv"}) {
    CAPTURE(f);
    CHECK(fs::exists(dir / f));
  }
  const std::string tax = read_file(dir / "taxonomy.csv");
  CHECK(std::count(tax.begin(), tax.end(), '\n') == 11);
}

TEST_CASE("analysis of a crafted log reproduces its taxonomy") {
  // Gates 0 and 3 always on, 1 always off, 2 and 4 input-dependent.
  GateLog log = log_from_columns({{1, 1, 1}, {0, 0, 0}, {0, 1, 0}, {1, 1, 1}, {1, 0, 1}});
  log.layer_map = {{0, 0}, {0, 1}, {2, 0}, {2, 1}, {2, 2}};
  const fs::path dir = scratch_dir("crafted");
  write_gate_log(dir / "g.bin", log);
  write_analysis(read_gate_log(dir / "g.bin"), dir / "out", {});
  CHECK(read_file(dir / "out/taxonomy.csv") ==
        "gate,layer,filter,category,on_count\n"
        "0,0,0,always_on,3\n"
        "1,0,1,always_off,0\n"
        "2,2,0,input_dependent,1\n"
        "3,2,1,always_on,3\n"
        "4,2,2,input_dependent,2\n");
  const std::string dist = read_file(dir / "out/layer_distribution.csv");
  CHECK(dist.find("\n0,1,1,0,") != std::string::npos);
  CHECK(dist.find("\n2,1,0,2,") != std::string::npos);
}

}  // TEST_SUITE
