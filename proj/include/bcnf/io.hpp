#pragma once

// On-disk formats: RFC-4180 numeric CSV tables, little-endian f64 blocks with
// JSON sidecars, and grid JSON.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bcnf/amplification.hpp"
#include "bcnf/binning.hpp"
#include "bcnf/cfm.hpp"
#include "bcnf/ensemble.hpp"
#include "bcnf/error.hpp"
#include "bcnf/net.hpp"
#include "bcnf/ring.hpp"
#include "bcnf/vib.hpp"

namespace bcnf::io {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

/// Shortest text that round-trips, at most 17 significant digits.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  if (begin != end && *begin == '+') ++begin;
  const auto r = std::from_chars(begin, end, v);
  if (r.ec != std::errc() || r.ptr != end)
    throw ConfigError(where + ": cannot parse number '" + s + "'");
  return v;
}

/// Numeric table with a header row.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ConfigError("csv: missing column '" + name + "'");
  }
};

namespace detail {

// One record; handles quoted fields without embedded newlines.
inline std::vector<std::string> split_record(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::ofstream open_out(const fs::path& path, bool binary = false) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
  return out;
}

inline std::ifstream open_in(const fs::path& path, bool binary = false) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  return in;
}

}  // namespace detail

inline void write_csv(const fs::path& path, const CsvTable& table) {
  auto out = detail::open_out(path, true);
  for (std::size_t i = 0; i < table.header.size(); ++i)
    out << (i ? "," : "") << table.header[i];
  out << "\r\n";
  for (const auto& row : table.rows) {
    require(row.size() == table.header.size(), "csv: row width does not match the header");
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << format_double(row[i]);
    out << "\r\n";
  }
}

inline CsvTable read_csv(const fs::path& path) {
  auto in = detail::open_in(path);
  CsvTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_record(line);
    if (table.header.empty()) {
      table.header = std::move(fields);
      continue;
    }
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != table.header.size())
      throw ConfigError(where + ": expected " + std::to_string(table.header.size()) + " fields");
    std::vector<double> row;
    row.reserve(fields.size());
    for (const auto& f : fields) row.push_back(parse_double(f, where));
    table.rows.push_back(std::move(row));
  }
  if (table.header.empty()) throw ConfigError("csv: '" + path.string() + "' is empty");
  return table;
}

inline void write_json(const fs::path& path, const json& j) {
  auto out = detail::open_out(path);
  out << j.dump(2) << "\n";
}

inline json read_json(const fs::path& path) {
  auto in = detail::open_in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("'" + path.string() + "': " + e.what());
  }
}

// -- sample sets and histories ----------------------------------------------

inline void write_samples(const fs::path& path, const Matrix& points) {
  CsvTable t{{"x", "y"}, {}};
  t.rows.reserve(static_cast<std::size_t>(points.cols()));
  for (Eigen::Index i = 0; i < points.cols(); ++i) t.rows.push_back({points(0, i), points(1, i)});
  write_csv(path, t);
}

inline SampleSet read_samples(const fs::path& path) {
  const auto t = read_csv(path);
  const std::size_t cx = t.column("x"), cy = t.column("y");
  require(!t.rows.empty(), "samples: '" + path.string() + "' has no points");
  SampleSet s;
  s.points.resize(2, static_cast<Eigen::Index>(t.rows.size()));
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    s.points(0, static_cast<Eigen::Index>(i)) = t.rows[i][cx];
    s.points(1, static_cast<Eigen::Index>(i)) = t.rows[i][cy];
  }
  return s;
}

inline void write_loss_history(const fs::path& path, const std::vector<LossRecord>& h) {
  CsvTable t{{"step", "loss"}, {}};
  for (const auto& r : h) t.rows.push_back({static_cast<double>(r.step), r.loss});
  write_csv(path, t);
}

inline void write_vib_history(const fs::path& path, const std::vector<VibRecord>& h) {
  CsvTable t{{"step", "cfm_loss", "kl_loss"}, {}};
  for (const auto& r : h) t.rows.push_back({static_cast<double>(r.step), r.cfm_loss, r.kl});
  write_csv(path, t);
}

// -- binary blocks ------------------------------------------------------------

inline void write_f64(std::ostream& out, std::span<const double> values) {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

inline std::vector<double> read_f64(std::istream& in, std::size_t n, const std::string& where) {
  std::vector<double> values(n);
  unsigned char bytes[8];
  for (auto& v : values) {
    if (!in.read(reinterpret_cast<char*>(bytes), 8))
      throw ConfigError(where + ": truncated binary block");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    v = std::bit_cast<double>(bits);
  }
  return values;
}

inline std::string architecture_id(const NetConfig& cfg) {
  return "mlp-elu-t-every-layer;hidden_layers=" + std::to_string(cfg.hidden_layers) +
         ";hidden_width=" + std::to_string(cfg.hidden_width) +
         ";input_dim=" + std::to_string(cfg.input_dim) +
         ";params=" + std::to_string(param_count(cfg));
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::string architecture_hash(const NetConfig& cfg) { return hex64(fnv1a(architecture_id(cfg))); }

inline json net_json(const NetConfig& cfg) {
  return {{"hidden_layers", cfg.hidden_layers},
          {"hidden_width", cfg.hidden_width},
          {"input_dim", cfg.input_dim},
          {"activation", "elu"},
          {"param_count", param_count(cfg)},
          {"architecture_hash", architecture_hash(cfg)}};
}

// `<stem>.bin` holds the blocks back to back, `<stem>.json` describes them.
struct Checkpoint {
  json sidecar;
  std::vector<std::vector<double>> blocks;
};

inline fs::path bin_path(const fs::path& stem) { return fs::path(stem.string() + ".bin"); }
inline fs::path sidecar_path(const fs::path& stem) { return fs::path(stem.string() + ".json"); }

inline void write_checkpoint(const fs::path& stem, const std::string& kind, const NetConfig& net,
                             const std::vector<std::vector<double>>& blocks, json extra) {
  {
    auto out = detail::open_out(bin_path(stem), true);
    for (const auto& b : blocks) write_f64(out, b);
  }
  json side;
  side["kind"] = kind;
  side["format"] = "f64-le";
  side["net"] = net_json(net);
  std::vector<std::size_t> sizes;
  for (const auto& b : blocks) sizes.push_back(b.size());
  side["blocks"] = sizes;
  for (auto& [k, v] : extra.items()) side[k] = v;
  write_json(sidecar_path(stem), side);
}

inline Checkpoint read_checkpoint(const fs::path& stem, const std::string& kind,
                                  const NetConfig* expect_net = nullptr) {
  Checkpoint ck;
  ck.sidecar = read_json(sidecar_path(stem));
  const std::string where = sidecar_path(stem).string();
  try {
    require(ck.sidecar.at("kind") == kind,
            where + ": expected a '" + kind + "' checkpoint, found '" +
                ck.sidecar.at("kind").get<std::string>() + "'");
    require(ck.sidecar.at("format") == "f64-le", where + ": unsupported format");
    if (expect_net)
      require(ck.sidecar.at("net").at("architecture_hash") == architecture_hash(*expect_net),
              where + ": architecture does not match the configured network");
    auto in = detail::open_in(bin_path(stem), true);
    for (std::size_t n : ck.sidecar.at("blocks").get<std::vector<std::size_t>>())
      ck.blocks.push_back(read_f64(in, n, bin_path(stem).string()));
    char extra;
    require(!in.read(&extra, 1), bin_path(stem).string() + ": trailing bytes");
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return ck;
}

inline NetConfig net_from_sidecar(const json& side) {
  NetConfig cfg;
  const auto& n = side.at("net");
  cfg.hidden_layers = n.at("hidden_layers");
  cfg.hidden_width = n.at("hidden_width");
  cfg.input_dim = n.at("input_dim");
  return cfg;
}

inline void save_params(const fs::path& stem, const NetConfig& net, const ParamVector& theta,
                        json extra = json::object()) {
  write_checkpoint(stem, "params", net, {theta}, std::move(extra));
}

inline ParamVector load_params(const fs::path& stem, const NetConfig* net = nullptr) {
  auto ck = read_checkpoint(stem, "params", net);
  require(ck.blocks.size() == 1, "params checkpoint must hold one block");
  return std::move(ck.blocks.front());
}

inline void save_posterior(const fs::path& stem, const NetConfig& net, const VarPosterior& q,
                           json extra = json::object()) {
  extra["block_names"] = {"mean", "rho"};
  write_checkpoint(stem, "vib-posterior", net, {q.mean, q.rho}, std::move(extra));
}

inline VarPosterior load_posterior(const fs::path& stem, const NetConfig* net = nullptr) {
  auto ck = read_checkpoint(stem, "vib-posterior", net);
  require(ck.blocks.size() == 2, "posterior checkpoint must hold mean and rho");
  VarPosterior q{std::move(ck.blocks[0]), std::move(ck.blocks[1])};
  q.validate();
  return q;
}

inline void save_ensemble(const fs::path& stem, const NetConfig& net, const PosteriorEnsemble& e,
                          json extra = json::object()) {
  extra["provenance"] = to_string(e.provenance);
  extra["members"] = e.size();
  write_checkpoint(stem, "ensemble", net, e.members, std::move(extra));
}

inline Provenance provenance_from_string(const std::string& s) {
  if (s == "vib") return Provenance::vib;
  if (s == "mcmc") return Provenance::mcmc;
  if (s == "oracle") return Provenance::oracle;
  throw ConfigError("unknown provenance '" + s + "'");
}

inline PosteriorEnsemble load_ensemble(const fs::path& stem, const NetConfig* net = nullptr) {
  auto ck = read_checkpoint(stem, "ensemble", net);
  PosteriorEnsemble e;
  e.provenance = provenance_from_string(ck.sidecar.at("provenance"));
  e.members = std::move(ck.blocks);
  require(!e.members.empty(), "ensemble checkpoint has no members");
  return e;
}

// -- grids and statistics ---------------------------------------------------

inline json grid_json(const QuantileGrid& g) {
  return {{"n_per_dim", g.n_per_dim},
          {"n_bins", g.n_bins()},
          {"radial_edges", g.radial_edges},
          {"angular_edges", g.angular_edges}};
}

inline QuantileGrid grid_from_json(const json& j) {
  QuantileGrid g;
  try {
    g.n_per_dim = j.at("n_per_dim");
    g.radial_edges = j.at("radial_edges").get<std::vector<double>>();
    g.angular_edges = j.at("angular_edges").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("grid: ") + e.what());
  }
  require(g.n_per_dim >= 1 && g.radial_edges.size() == g.n_per_dim + 1 &&
              g.angular_edges.size() == g.n_per_dim + 1,
          "grid: edge arrays do not match n_per_dim");
  return g;
}

/// Long format: one row per (member, bin).
inline void write_bin_stats(const fs::path& path, const BinEnsembleStats& s) {
  CsvTable t{{"member", "bin", "j_r", "j_phi", "set_size", "frequency"}, {}};
  const std::size_t n = s.n_per_dim;
  for (std::size_t i = 0; i < s.members(); ++i)
    for (std::size_t j = 0; j < s.n_bins(); ++j)
      t.rows.push_back({static_cast<double>(i), static_cast<double>(j),
                        static_cast<double>(j / n), static_cast<double>(j % n),
                        static_cast<double>(s.set_size),
                        s.counts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))});
  write_csv(path, t);
}

inline BinEnsembleStats read_bin_stats(const fs::path& path) {
  const auto t = read_csv(path);
  const std::size_t cm = t.column("member"), cb = t.column("bin"), cs = t.column("set_size"),
                    cf = t.column("frequency");
  require(!t.rows.empty(), "bin stats: '" + path.string() + "' is empty");
  std::size_t members = 0, bins = 0;
  for (const auto& r : t.rows) {
    members = std::max(members, static_cast<std::size_t>(r[cm]) + 1);
    bins = std::max(bins, static_cast<std::size_t>(r[cb]) + 1);
  }
  const auto n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(bins))));
  require(n * n == bins, "bin stats: bin count is not a square");
  require(t.rows.size() == members * bins, "bin stats: table is not complete");
  Matrix f(static_cast<Eigen::Index>(members), static_cast<Eigen::Index>(bins));
  for (const auto& r : t.rows)
    f(static_cast<Eigen::Index>(r[cm]), static_cast<Eigen::Index>(r[cb])) = r[cf];
  return make_bin_stats(std::move(f), static_cast<std::size_t>(t.rows.front()[cs]), n);
}

inline void write_coverage(const fs::path& path, const CoverageCurve& c) {
  CsvTable t;
  t.header = {"nominal", "mean"};
  for (std::size_t j = 0; j < c.n_per_dim; ++j) t.header.push_back("marginal_r_" + std::to_string(j));
  for (std::size_t j = 0; j < c.n_per_dim; ++j) t.header.push_back("marginal_phi_" + std::to_string(j));
  for (std::size_t i = 0; i < c.nominal.size(); ++i) {
    std::vector<double> row{c.nominal[i], c.mean[i]};
    const auto ii = static_cast<Eigen::Index>(i);
    for (Eigen::Index j = 0; j < c.marginal_r.cols(); ++j) row.push_back(c.marginal_r(ii, j));
    for (Eigen::Index j = 0; j < c.marginal_phi.cols(); ++j) row.push_back(c.marginal_phi(ii, j));
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

/// Reads the aggregate columns back; per-bin coverage is not part of the file.
inline CoverageCurve read_coverage(const fs::path& path) {
  const auto t = read_csv(path);
  std::size_t n = 0;
  while (std::find(t.header.begin(), t.header.end(), "marginal_r_" + std::to_string(n)) !=
         t.header.end())
    ++n;
  CoverageCurve c;
  c.n_per_dim = n;
  const auto rows = static_cast<Eigen::Index>(t.rows.size());
  c.marginal_r.resize(rows, static_cast<Eigen::Index>(n));
  c.marginal_phi.resize(rows, static_cast<Eigen::Index>(n));
  const std::size_t cn = t.column("nominal"), cm = t.column("mean");
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    c.nominal.push_back(t.rows[i][cn]);
    c.mean.push_back(t.rows[i][cm]);
    for (std::size_t j = 0; j < n; ++j) {
      c.marginal_r(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          t.rows[i][t.column("marginal_r_" + std::to_string(j))];
      c.marginal_phi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          t.rows[i][t.column("marginal_phi_" + std::to_string(j))];
    }
  }
  return c;
}

inline void write_amplification(const fs::path& path, std::span<const AmplificationReport> reports) {
  CsvTable t{{"n_q", "n_hat", "amplification", "mean_per_bin"}, {}};
  for (const auto& r : reports)
    t.rows.push_back({static_cast<double>(r.n_q), r.n_hat, r.amplification, r.mean_per_bin});
  write_csv(path, t);
}

inline std::vector<AmplificationReport> read_amplification(const fs::path& path) {
  const auto t = read_csv(path);
  const std::size_t cq = t.column("n_q"), cn = t.column("n_hat"), ca = t.column("amplification"),
                    cp = t.column("mean_per_bin");
  std::vector<AmplificationReport> out;
  for (const auto& r : t.rows) {
    AmplificationReport a;
    a.n_q = static_cast<std::size_t>(r[cq]);
    a.n_hat = r[cn];
    a.amplification = r[ca];
    a.mean_per_bin = r[cp];
    out.push_back(a);
  }
  return out;
}

struct ClosureRow {
  std::size_t n_q = 0;
  ClosureResult result;
};

inline void write_closure(const fs::path& path, std::span<const ClosureRow> rows) {
  CsvTable t{{"n_q", "js_mean_pred", "js_equivalent", "js_equivalent_std"}, {}};
  for (const auto& r : rows)
    t.rows.push_back({static_cast<double>(r.n_q), r.result.js_mean_pred, r.result.js_equivalent,
                      r.result.js_equivalent_std});
  write_csv(path, t);
}

inline std::vector<ClosureRow> read_closure(const fs::path& path) {
  const auto t = read_csv(path);
  const std::size_t cq = t.column("n_q"), cp = t.column("js_mean_pred"),
                    ce = t.column("js_equivalent"), cs = t.column("js_equivalent_std");
  std::vector<ClosureRow> out;
  for (const auto& r : t.rows)
    out.push_back({static_cast<std::size_t>(r[cq]), {r[cp], r[ce], r[cs]}});
  return out;
}

}  // namespace bcnf::io
