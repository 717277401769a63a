#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "bcnf/io.hpp"
#include "ensemble_oracles.hpp"

using namespace bcnf;
namespace fs = std::filesystem;

namespace {

class IoTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("bcnf_io_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  static void dump(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
  }

  fs::path dir_;
};

}  // namespace

TEST(FormatDouble, RoundTripsExactly) {
  CounterRng rng(1);
  for (int i = 0; i < 100000; ++i) {
    const double v = std::bit_cast<double>(rng());
    if (!std::isfinite(v)) continue;
    EXPECT_EQ(io::parse_double(io::format_double(v), "test"), v);
  }
  for (double v : {0.0, -0.0, 1.0, 0.1, 1e-310, std::numeric_limits<double>::max(),
                   std::numeric_limits<double>::denorm_min()})
    EXPECT_EQ(io::parse_double(io::format_double(v), "test"), v);
  EXPECT_EQ(io::format_double(0.1), "0.10000000000000001");
  EXPECT_EQ(io::format_double(2.0), "2");
}

TEST(FormatDouble, ParseErrors) {
  EXPECT_THROW(io::parse_double("", "x"), ConfigError);
  EXPECT_THROW(io::parse_double("1.5abc", "x"), ConfigError);
  EXPECT_THROW(io::parse_double("abc", "x"), ConfigError);
  EXPECT_EQ(io::parse_double("+2.5", "x"), 2.5);
}

TEST_F(IoTest, SamplesCsvRoundTrip) {
  const auto s = sample_ring(RingSpec{}, 500, 2);
  io::write_samples(path("s.csv"), s.points);
  const auto text = slurp(path("s.csv"));
  EXPECT_EQ(text.substr(0, 5), "x,y\r\n");
  const auto back = io::read_samples(path("s.csv"));
  EXPECT_TRUE((back.points.array() == s.points.array()).all());
}

TEST_F(IoTest, CsvQuotedFieldsAndErrors) {
  dump(path("q.csv"), "\"x\",\"y\"\n\"1.5\",2\n3,\"-4e-3\"\n");
  const auto s = io::read_samples(path("q.csv"));
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.points(1, 1), -4e-3);

  dump(path("bad.csv"), "x,y\r\n1,2,3\r\n");
  EXPECT_THROW(io::read_csv(path("bad.csv")), ConfigError);
  dump(path("empty.csv"), "");
  EXPECT_THROW(io::read_csv(path("empty.csv")), ConfigError);
  dump(path("noy.csv"), "x,z\r\n1,2\r\n");
  try {
    io::read_samples(path("noy.csv"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'y'"), std::string::npos);
  }
  EXPECT_THROW(io::read_csv(path("missing.csv")), ConfigError);
}

TEST_F(IoTest, HistoryHeaders) {
  io::write_loss_history(path("l.csv"), {{0, 1.5}, {1, 0.5}});
  EXPECT_EQ(io::read_csv(path("l.csv")).header, (std::vector<std::string>{"step", "loss"}));
  io::write_vib_history(path("v.csv"), {{0, 1.5, 2.5}});
  const auto t = io::read_csv(path("v.csv"));
  EXPECT_EQ(t.header, (std::vector<std::string>{"step", "cfm_loss", "kl_loss"}));
  EXPECT_EQ(t.rows[0][2], 2.5);
}

TEST(BinaryBlocks, LittleEndianLayout) {
  std::stringstream ss;
  const std::vector<double> v{1.0, -2.0};
  io::write_f64(ss, v);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 16u);
  const std::string one("\x00\x00\x00\x00\x00\x00\xf0\x3f", 8);
  const std::string minus_two("\x00\x00\x00\x00\x00\x00\x00\xc0", 8);
  EXPECT_EQ(bytes.substr(0, 8), one);
  EXPECT_EQ(bytes.substr(8, 8), minus_two);
  EXPECT_EQ(io::read_f64(ss, 2, "t"), v);
  std::stringstream short_in(std::string("\x00\x00\x00", 3));
  EXPECT_THROW(io::read_f64(short_in, 1, "t"), ConfigError);
}

TEST_F(IoTest, ParamsCheckpoint) {
  const NetConfig net;
  const auto theta = init_params(net, 3);
  io::save_params(path("cfm"), net, theta, {{"note", "x"}});
  EXPECT_TRUE(fs::exists(path("cfm.bin")));
  EXPECT_EQ(fs::file_size(path("cfm.bin")), 8 * theta.size());
  const auto side = io::read_json(path("cfm.json"));
  EXPECT_EQ(side.at("kind"), "params");
  EXPECT_EQ(side.at("format"), "f64-le");
  EXPECT_EQ(side.at("net").at("param_count"), theta.size());
  EXPECT_EQ(side.at("note"), "x");
  EXPECT_EQ(io::load_params(path("cfm"), &net), theta);
  EXPECT_EQ(io::net_from_sidecar(side).hidden_width, net.hidden_width);

  NetConfig other;
  other.hidden_width = 16;
  EXPECT_THROW(io::load_params(path("cfm"), &other), ConfigError);
  EXPECT_THROW(io::load_ensemble(path("cfm")), ConfigError);
}

TEST_F(IoTest, CorruptCheckpointsRejected) {
  const NetConfig net{1, 2};
  const auto theta = init_params(net, 4);
  io::save_params(path("p"), net, theta);
  {
    std::ofstream out(path("p.bin"), std::ios::binary | std::ios::app);
    out << "x";
  }
  EXPECT_THROW(io::load_params(path("p")), ConfigError);
  io::save_params(path("p"), net, theta);
  fs::resize_file(path("p.bin"), 8 * theta.size() - 3);
  EXPECT_THROW(io::load_params(path("p")), ConfigError);
  dump(path("p.json"), "{not json");
  EXPECT_THROW(io::load_params(path("p")), ConfigError);
}

TEST_F(IoTest, PosteriorAndEnsembleCheckpoints) {
  const NetConfig net{2, 4};
  const auto q = VarPosterior::around(init_params(net, 5), 0.02);
  io::save_posterior(path("post"), net, q);
  const auto qb = io::load_posterior(path("post"), &net);
  EXPECT_EQ(qb.mean, q.mean);
  EXPECT_EQ(qb.rho, q.rho);

  PosteriorEnsemble e;
  e.provenance = Provenance::vib;
  for (std::uint64_t k = 0; k < 3; ++k) e.members.push_back(init_params(net, 10 + k));
  io::save_ensemble(path("ens"), net, e, {{"acceptance_history", {0.5, 0.6}}});
  const auto eb = io::load_ensemble(path("ens"), &net);
  EXPECT_EQ(eb.provenance, Provenance::vib);
  EXPECT_EQ(eb.members, e.members);
  EXPECT_EQ(io::read_json(path("ens.json")).at("members"), 3);
  EXPECT_THROW(io::provenance_from_string("other"), ConfigError);
}

TEST_F(IoTest, GridJsonRoundTrip) {
  const auto grid = build_grid(sample_ring(RingSpec{}, 10000, 6), 4);
  io::write_json(path("g.json"), io::grid_json(grid));
  const auto back = io::grid_from_json(io::read_json(path("g.json")));
  EXPECT_EQ(back.n_per_dim, 4u);
  EXPECT_EQ(back.radial_edges, grid.radial_edges);
  EXPECT_EQ(back.angular_edges, grid.angular_edges);
  auto broken = io::grid_json(grid);
  broken["radial_edges"] = std::vector<double>{1.0, 2.0};
  EXPECT_THROW(io::grid_from_json(broken), ConfigError);
  EXPECT_THROW(io::grid_from_json(io::json{{"n_per_dim", 2}}), ConfigError);
}

TEST_F(IoTest, StatisticsTablesRoundTrip) {
  const auto grid = build_grid(sample_ring(RingSpec{}, 10000, 7), 3);
  std::vector<BinEnsembleStats> runs;
  for (std::uint64_t r = 0; r < 3; ++r) runs.push_back(oracle::bootstrap_draws(grid, RingSpec{}, 300, 6, 8 + r));

  io::write_bin_stats(path("b.csv"), runs[0]);
  const auto t = io::read_csv(path("b.csv"));
  EXPECT_EQ(t.header, (std::vector<std::string>{"member", "bin", "j_r", "j_phi", "set_size", "frequency"}));
  EXPECT_EQ(t.rows[5][2], 1.0);  // bin 5 on a 3x3 grid: j_r = 1, j_phi = 2
  EXPECT_EQ(t.rows[5][3], 2.0);
  const auto b = io::read_bin_stats(path("b.csv"));
  EXPECT_TRUE((b.counts.array() == runs[0].counts.array()).all());
  EXPECT_EQ(b.set_size, 300u);
  EXPECT_EQ(b.n_per_dim, 3u);

  const auto curve = coverage(runs, nominal_grid());
  io::write_coverage(path("c.csv"), curve);
  const auto ct = io::read_csv(path("c.csv"));
  EXPECT_EQ(ct.header.size(), 2u + 2u * 3u);
  EXPECT_EQ(ct.header[2], "marginal_r_0");
  EXPECT_EQ(ct.header[5], "marginal_phi_0");
  const auto cb = io::read_coverage(path("c.csv"));
  EXPECT_EQ(cb.mean, curve.mean);
  EXPECT_TRUE((cb.marginal_phi.array() == curve.marginal_phi.array()).all());
  const auto da = deviation(curve), db = deviation(cb);
  EXPECT_EQ(da.mad_r, db.mad_r);

  const std::vector<AmplificationReport> amp{amplification_report(runs[0], 100.0),
                                             amplification_report(runs[1], 100.0)};
  io::write_amplification(path("a.csv"), amp);
  EXPECT_EQ(io::read_csv(path("a.csv")).header,
            (std::vector<std::string>{"n_q", "n_hat", "amplification", "mean_per_bin"}));
  const auto ab = io::read_amplification(path("a.csv"));
  EXPECT_EQ(ab[1].n_hat, amp[1].n_hat);
  EXPECT_EQ(ab[1].n_q, 9u);

  const std::vector<io::ClosureRow> rows{{9, {0.1, 0.2, 0.03}}, {16, {0.3, 0.4, 0.0}}};
  io::write_closure(path("j.csv"), rows);
  EXPECT_EQ(io::read_csv(path("j.csv")).header,
            (std::vector<std::string>{"n_q", "js_mean_pred", "js_equivalent", "js_equivalent_std"}));
  const auto jb = io::read_closure(path("j.csv"));
  EXPECT_EQ(jb[0].result.js_equivalent_std, 0.03);
  EXPECT_EQ(jb[1].n_q, 16u);
}

TEST_F(IoTest, IncompleteBinStatsRejected) {
  dump(path("b.csv"), "member,bin,j_r,j_phi,set_size,frequency\r\n0,0,0,0,10,0.5\r\n0,1,0,1,10,0.5\r\n");
  EXPECT_THROW(io::read_bin_stats(path("b.csv")), ConfigError);
  dump(path("b.csv"),
       "member,bin,j_r,j_phi,set_size,frequency\r\n0,0,0,0,10,0.25\r\n0,1,0,1,10,0.25\r\n"
       "0,2,1,0,10,0.25\r\n");
  EXPECT_THROW(io::read_bin_stats(path("b.csv")), ConfigError);
}
