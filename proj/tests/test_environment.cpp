#include <chrono>
#include <cstring>
#include <memory>
#include <set>
#include <thread>

#include <gtest/gtest.h>

#include "integrity/eval.hpp"
#include "integrity/feature_file.hpp"
#include "integrity/file_source.hpp"
#include "integrity/http_source.hpp"
#include "integrity/random.hpp"
#include "integrity/synthetic.hpp"
#include "support.hpp"

using namespace integrity;
using testing_support::ScratchDir;

namespace {

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::InvalidArgument;
}

FeatureMatrix float_matrix(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  RowMatrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal() * 3.0);
  return FeatureMatrix(std::move(m));
}

std::vector<unsigned char> header(std::uint8_t version, std::uint32_t dim, std::uint64_t count) {
  std::vector<unsigned char> b{'P', 'L', 'A', 'F', version};
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(dim >> (8 * i)));
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>(count >> (8 * i)));
  return b;
}

void append_float(std::vector<unsigned char>& b, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(u >> (8 * i)));
}

}  // namespace

// ---- random ----

TEST(Random, SeedsAreReproducibleAndDistinct) {
  Rng a(5), b(5), c(6);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
  EXPECT_NE(derive_seed({1, 2, 3}), derive_seed({1, 3, 2}));
  EXPECT_NE(hash_label("query"), hash_label("subsample"));
}

TEST(Random, BelowIsInRangeAndUnbiased) {
  Rng rng(9);
  std::vector<int> counts(7);
  for (int i = 0; i < 70000; ++i) ++counts[rng.below(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(Random, NormalMoments) {
  Rng rng(10);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x, s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Random, SampleWithoutReplacement) {
  Rng rng(3);
  const auto idx = rng.sample_without_replacement(20, 8);
  ASSERT_EQ(idx.size(), 8u);
  EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 8u);
  EXPECT_LT(idx.back(), 20u);
  EXPECT_EQ(rng.sample_without_replacement(4, 4), (std::vector<std::size_t>{0, 1, 2, 3}));
}

// ---- feature matrix ----

TEST(FeatureMatrix, AppendSelectSlice) {
  auto m = FeatureMatrix::from_rows({{1, 2}, {3, 4}});
  m.append(FeatureMatrix::from_rows({{5, 6}}));
  EXPECT_EQ(m.rows(), 3u);
  EXPECT_EQ(m.row(2)[1], 6.0);
  const std::vector<std::size_t> idx{0, 2};
  EXPECT_EQ(m.select_rows(idx), FeatureMatrix::from_rows({{1, 2}, {5, 6}}));
  EXPECT_EQ(m.slice_rows(1, 2), FeatureMatrix::from_rows({{3, 4}, {5, 6}}));
  EXPECT_EQ(code_of([&] { m.append(FeatureMatrix::from_rows({{1, 2, 3}})); }), ErrorCode::DimensionMismatch);
  FeatureMatrix empty;
  empty.append(m);
  EXPECT_EQ(empty, m);
}

// ---- PLAF ----

TEST(FeatureFile, RoundTripBitExact) {
  ScratchDir dir("plaf");
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto m = float_matrix(1 + s % 9, 1 + s % 13, s);
    const auto path = dir / "m.plaf";
    write_feature_file(path, m);
    const auto back = read_feature_file(path);
    ASSERT_EQ(back.rows(), m.rows());
    ASSERT_EQ(back.dim(), m.dim());
    EXPECT_EQ(std::memcmp(back.data().data(), m.data().data(), m.rows() * m.dim() * sizeof(double)), 0);
  }
}

TEST(FeatureFile, LayoutIsLittleEndian) {
  const auto bytes = encode_feature_matrix(FeatureMatrix::from_rows({{1.0, -2.0}}));
  ASSERT_EQ(bytes.size(), kPlafHeaderSize + 8);
  const std::vector<unsigned char> head(bytes.begin(), bytes.begin() + kPlafHeaderSize);
  EXPECT_EQ(head, header(1, 2, 1));
  // 1.0f = 0x3f800000, -2.0f = 0xc0000000
  const std::vector<unsigned char> payload(bytes.begin() + kPlafHeaderSize, bytes.end());
  EXPECT_EQ(payload, (std::vector<unsigned char>{0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0}));
}

TEST(FeatureFile, EmptyMatrixRoundTrips) {
  const auto back = decode_feature_matrix(encode_feature_matrix(FeatureMatrix(7)));
  EXPECT_EQ(back.rows(), 0u);
  EXPECT_EQ(back.dim(), 7u);
}

TEST(FeatureFile, MalformedHeaders) {
  auto good = header(1, 2, 10);
  for (int i = 0; i < 20; ++i) append_float(good, 0.5f);
  EXPECT_EQ(decode_feature_matrix(good).rows(), 10u);

  auto magic = good;
  magic[0] = 'X';
  EXPECT_EQ(code_of([&] { decode_feature_matrix(magic); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([&] { decode_feature_matrix({'P', 'L'}); }), ErrorCode::BadMagic);

  auto version = good;
  version[4] = 2;
  EXPECT_EQ(code_of([&] { decode_feature_matrix(version); }), ErrorCode::VersionUnsupported);

  const std::vector<unsigned char> short_header(good.begin(), good.begin() + 11);
  EXPECT_EQ(code_of([&] { decode_feature_matrix(short_header); }), ErrorCode::TruncatedPayload);

  // count = 10 but only 9 rows of bytes
  const std::vector<unsigned char> nine_rows(good.begin(), good.end() - 8);
  EXPECT_EQ(code_of([&] { decode_feature_matrix(nine_rows); }), ErrorCode::TruncatedPayload);

  auto extra = good;
  append_float(extra, 1.0f);
  EXPECT_EQ(code_of([&] { decode_feature_matrix(extra); }), ErrorCode::TruncatedPayload);

  auto nan = header(1, 1, 2);
  append_float(nan, 1.0f);
  append_float(nan, std::numeric_limits<float>::quiet_NaN());
  EXPECT_EQ(code_of([&] { decode_feature_matrix(nan); }), ErrorCode::NonFiniteValue);

  auto huge = header(1, 0xFFFFFFFF, 0xFFFFFFFFFFFFull);
  EXPECT_EQ(code_of([&] { decode_feature_matrix(huge); }), ErrorCode::TruncatedPayload);
}

TEST(FeatureFile, ErrorsNameThePath) {
  ScratchDir dir("plaf-err");
  testing_support::write_file(dir / "bad.plaf", "NOPE");
  try {
    read_feature_file(dir / "bad.plaf");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadMagic);
    EXPECT_NE(std::string(e.what()).find("bad.plaf"), std::string::npos);
  }
  EXPECT_EQ(code_of([&] { read_feature_file(dir / "missing.plaf"); }), ErrorCode::Io);
}

TEST(FeatureCsv, Import) {
  ScratchDir dir("csv");
  testing_support::write_file(dir / "a.csv", "dim=3\n1,2,3\n4.5,-1e2,0\r\n\n");
  const auto m = read_feature_csv(dir / "a.csv");
  EXPECT_EQ(m, FeatureMatrix::from_rows({{1, 2, 3}, {4.5, -100, 0}}));

  testing_support::write_file(dir / "b.csv", "1,2,3\n");
  EXPECT_EQ(code_of([&] { read_feature_csv(dir / "b.csv"); }), ErrorCode::BadMagic);
  testing_support::write_file(dir / "c.csv", "dim=3\n1,2\n");
  EXPECT_EQ(code_of([&] { read_feature_csv(dir / "c.csv"); }), ErrorCode::DimensionMismatch);
  testing_support::write_file(dir / "d.csv", "dim=2\n1,x\n");
  EXPECT_EQ(code_of([&] { read_feature_csv(dir / "d.csv"); }), ErrorCode::InvalidArgument);
  testing_support::write_file(dir / "e.csv", "dim=2\n1,nan\n");
  EXPECT_EQ(code_of([&] { read_feature_csv(dir / "e.csv"); }), ErrorCode::NonFiniteValue);
}

// ---- file source ----

TEST(FileSource, CursorWalksThePool) {
  ScratchDir dir("files");
  const auto rows = float_matrix(25, 3, 1);
  std::filesystem::create_directories(dir.path() / "suspect");
  write_feature_file(feature_file_path(dir.path(), Role::Suspect, ActionId{4}), rows);
  EXPECT_EQ(feature_file_path(dir.path(), Role::Suspect, ActionId{4}), dir.path() / "suspect" / "4.plaf");

  std::size_t cursor = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto batch = file_source_sample(dir.path(), Role::Suspect, ActionId{4}, 5, cursor);
    EXPECT_EQ(batch, rows.slice_rows(5 * i, 5));
  }
  EXPECT_EQ(cursor, 25u);
  EXPECT_EQ(code_of([&] { file_source_sample(dir.path(), Role::Suspect, ActionId{4}, 5, cursor); }),
            ErrorCode::PoolExhausted);
  std::size_t c2 = 0;
  EXPECT_EQ(code_of([&] { file_source_sample(dir.path(), Role::Suspect, ActionId{5}, 1, c2); }),
            ErrorCode::UnknownPrompt);
}

TEST(FileSource, SessionNeverServesARowTwice) {
  ScratchDir dir("files2");
  const auto rows = float_matrix(12, 2, 2);
  std::filesystem::create_directories(dir.path() / "reference_a");
  write_feature_file(feature_file_path(dir.path(), Role::ReferenceA, ActionId{1}), rows);
  FileSource src(dir.path(), Role::ReferenceA);
  const Action a{ActionId{1}, "p"};
  FeatureMatrix seen;
  for (int i = 0; i < 4; ++i) seen.append(src.sample(a, 3, 42));  // same seed every time
  EXPECT_EQ(seen, rows);
  EXPECT_EQ(src.cursor(ActionId{1}), 12u);
  EXPECT_EQ(code_of([&] { src.sample(a, 1, 0); }), ErrorCode::PoolExhausted);
}

TEST(FileSource, AutomatonAbortsWhenPoolRunsDry) {
  ScratchDir dir("files3");
  for (Role role : {Role::ReferenceA, Role::ReferenceB, Role::Suspect}) {
    std::filesystem::create_directories(dir.path() / std::string(to_string(role)));
    for (std::uint64_t id = 1; id <= 2; ++id)
      write_feature_file(feature_file_path(dir.path(), role, ActionId{id}), float_matrix(15, 4, id * 10 + static_cast<int>(role)));
  }
  const auto env = make_file_environment(dir.path());
  try {
    run_prompt_automaton(env, {{ActionId{1}, "a"}, {ActionId{2}, "b"}}, AutomatonConfig{});
    FAIL();
  } catch (const AutomatonAborted& e) {
    EXPECT_EQ(e.partial().trace.size(), 3u);
    EXPECT_NE(std::string(e.what()).find("PoolExhausted"), std::string::npos);
  }
}

// ---- synthetic ----

TEST(Synthetic, SameSeedSameMatrix) {
  const auto spec = testing_support::desk_spec({0.5, 0.0}, 3, 6);
  const auto a = synthetic_sample(spec, SyntheticRole::Reference, ActionId{1}, 10, 99);
  EXPECT_EQ(a, synthetic_sample(spec, SyntheticRole::Reference, ActionId{1}, 10, 99));
  EXPECT_FALSE(a == synthetic_sample(spec, SyntheticRole::Reference, ActionId{1}, 10, 100));
  EXPECT_EQ(code_of([&] { synthetic_sample(spec, SyntheticRole::Suspect, ActionId{9}, 1, 0); }), ErrorCode::UnknownPrompt);
  EXPECT_EQ(code_of([&] { synthetic_sample(spec, SyntheticRole::Suspect, ActionId{1}, 0, 0); }), ErrorCode::InvalidArgument);
}

TEST(Synthetic, TrueKlClosedForms) {
  SyntheticPrompt p;
  p.id = ActionId{1};
  p.text = "x";
  p.reference_mean = Eigen::VectorXd::Zero(1);
  p.reference_cov = Eigen::MatrixXd::Identity(1, 1);
  p.suspect_mean = Eigen::VectorXd::Ones(1);
  p.suspect_cov = Eigen::MatrixXd::Identity(1, 1);
  SyntheticPrompt same = p;
  same.id = ActionId{2};
  same.suspect_mean = same.reference_mean;
  const SyntheticSpec spec(1, {p, same});
  EXPECT_NEAR(true_kl(spec, ActionId{1}), 0.5, 1e-15);
  EXPECT_EQ(true_kl(spec, ActionId{2}), 0.0);

  // the fit on 10^4 samples recovers the analytic value
  const auto ref = fit_gaussian(synthetic_sample(spec, SyntheticRole::Reference, ActionId{1}, 20000, 1),
                                CovarianceMode::FullRidge, 0.0);
  const auto sus = fit_gaussian(synthetic_sample(spec, SyntheticRole::Suspect, ActionId{1}, 20000, 2),
                                CovarianceMode::FullRidge, 0.0);
  EXPECT_NEAR(kl_divergence(ref, sus), 0.5, 0.025);
}

TEST(Synthetic, ShiftsInStandardDeviations) {
  SyntheticParams params;
  params.variances = {4.0};
  const auto spec = make_synthetic_spec(params);
  ASSERT_EQ(spec.prompts().size(), 5u);
  EXPECT_EQ(spec.prompts()[0].id, ActionId{1});
  // uncorrelated: KL = d * s^2 / 2
  EXPECT_NEAR(true_kl(spec, ActionId{1}), 8 * 1.0 / 2, 1e-12);
  EXPECT_NEAR(true_kl(spec, ActionId{2}), 8 * 0.09 / 2, 1e-12);
  for (std::uint64_t id = 2; id <= 5; ++id) EXPECT_GT(true_kl(spec, ActionId{1}), true_kl(spec, ActionId{id}));
}

TEST(Synthetic, NoiseEntersSuspectCovariance) {
  SyntheticParams params;
  params.dim = 2;
  params.shifts = {0.0};
  params.suspect_noise_sigma = 0.5;
  const auto spec = make_synthetic_spec(params);
  // suspect N(mu, 1.25 I) vs reference N(mu, I): per coordinate 0.5 (1.25 - 1 - ln 1.25)... in reverse direction
  const double r = 1.0 / 1.25;
  EXPECT_NEAR(true_kl(spec, ActionId{1}), 2 * 0.5 * (r - 1 - std::log(r)), 1e-12);
  const auto s = synthetic_sample(spec, SyntheticRole::Suspect, ActionId{1}, 40000, 5);
  const auto g = fit_gaussian(s, CovarianceMode::Diagonal, 0.0);
  EXPECT_NEAR(g.variances()[0], 1.25, 0.05);
  EXPECT_EQ(true_kl(spec.intact(), ActionId{1}), 0.0);
}

TEST(Synthetic, RejectsNonSpd) {
  SyntheticParams params;
  params.variances = {-1.0};
  EXPECT_THROW(make_synthetic_spec(params), Error);
  params.variances = {1.0};
  params.correlation = -0.5;  // equicorrelation below -1/(d-1)
  EXPECT_THROW(make_synthetic_spec(params), Error);

  auto j = make_synthetic_spec(SyntheticParams{}).to_json();
  j["prompts"][0]["suspect_cov"][0][1] = 5.0;
  j["prompts"][0]["suspect_cov"][1][0] = 5.0;
  EXPECT_THROW(SyntheticSpec::from_json(j), Error);
}

TEST(Synthetic, JsonRoundTrip) {
  ScratchDir dir("spec");
  SyntheticParams params;
  params.correlation = 0.2;
  params.suspect_noise_sigma = 0.1;
  const auto spec = make_synthetic_spec(params);
  spec.save(dir / "s.json");
  const auto back = SyntheticSpec::load(dir / "s.json");
  EXPECT_EQ(back.to_json().dump(), spec.to_json().dump());
  EXPECT_EQ(synthetic_sample(back, SyntheticRole::Suspect, ActionId{2}, 4, 1),
            synthetic_sample(spec, SyntheticRole::Suspect, ActionId{2}, 4, 1));
}

TEST(Synthetic, ScaledShiftAndIntact) {
  const auto spec = make_synthetic_spec(SyntheticParams{});
  const auto half = spec.with_scaled_shift(0.5);
  EXPECT_NEAR(true_kl(half, ActionId{1}), 0.25 * true_kl(spec, ActionId{1}), 1e-12);
  for (const auto& p : spec.intact().prompts()) EXPECT_EQ(true_kl(spec.intact(), p.id), 0.0);
}

// ---- cost ledger ----

TEST(CostLedger, ConcurrentRecords) {
  CostLedger ledger;
  {
    std::vector<std::jthread> pool;
    for (int t = 0; t < 4; ++t)
      pool.emplace_back([&, t] {
        for (int i = 0; i < 1000; ++i) ledger.record(t % 2 ? Role::Suspect : Role::ReferenceA, ActionId{1}, 1);
      });
  }
  const auto c = ledger.snapshot();
  EXPECT_EQ(c.suspect_queries, 2000u);
  EXPECT_EQ(c.reference_queries, 2000u);
  EXPECT_EQ(c.per_prompt.at(ActionId{1}).suspect_queries, 2000u);
  EXPECT_EQ(c.reported(false), 2000u);
  EXPECT_EQ(c.reported(true), 4000u);
}

// ---- HTTP ----

namespace {

class StubServer {
 public:
  StubServer() {
    server_.Post(kFeaturesPath, [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body);
      last_request = body;
      const std::string model = body["model"];
      const std::size_t n = body["n"];
      if (model == "broken") {
        res.status = 503;
        res.set_content(R"({"error": "model is loading"})", "application/json");
        return;
      }
      if (model == "slow") std::this_thread::sleep_for(std::chrono::milliseconds(600));
      const std::size_t dim = model == "wide" ? 2048 : model == "shifty" && ++calls_ > 1 ? 3 : 4;
      nlohmann::json rows = nlohmann::json::array();
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(model == "ragged" && i == 1 ? dim - 1 : dim, 0.25 * static_cast<double>(i));
        rows.push_back(row);
      }
      if (model == "garbage") {
        res.set_content("{not json", "application/json");
        return;
      }
      res.set_content(nlohmann::json{{"dim", dim}, {"features", rows}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  HttpEndpoint endpoint(int timeout_ms = 5000) const {
    return {"http://127.0.0.1:" + std::to_string(port_), std::chrono::milliseconds(timeout_ms)};
  }

  nlohmann::json last_request;

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  int calls_ = 0;
};

}  // namespace

TEST(Http, WellFormedResponse) {
  StubServer stub;
  CostLedger ledger;
  const auto m = http_source_sample(stub.endpoint(), "wide", "a cat", 5, 7, std::nullopt, &ledger, Role::Suspect, ActionId{3});
  EXPECT_EQ(m.rows(), 5u);
  EXPECT_EQ(m.dim(), 2048u);
  EXPECT_EQ(stub.last_request["prompt"], "a cat");
  EXPECT_EQ(stub.last_request["n"], 5);
  EXPECT_EQ(stub.last_request["seed"], 7);
  EXPECT_EQ(ledger.snapshot().suspect_queries, 5u);
  http_source_sample(stub.endpoint(), "plain", "a dog", 2);
  EXPECT_FALSE(stub.last_request.contains("seed"));
}

TEST(Http, ProtocolViolations) {
  StubServer stub;
  EXPECT_EQ(code_of([&] { http_source_sample(stub.endpoint(), "ragged", "p", 3); }), ErrorCode::ProtocolViolation);
  EXPECT_EQ(code_of([&] { http_source_sample(stub.endpoint(), "garbage", "p", 3); }), ErrorCode::ProtocolViolation);
  EXPECT_EQ(code_of([&] { http_source_sample(stub.endpoint(), "plain", "p", 3, std::nullopt, 2048); }),
            ErrorCode::ProtocolViolation);
  EXPECT_EQ(code_of([] { parse_features_response(R"({"dim":2,"features":[[1,2]]})", 2); }), ErrorCode::ProtocolViolation);
  EXPECT_EQ(code_of([] { parse_features_response(R"({"features":[]})", 0); }), ErrorCode::ProtocolViolation);
  EXPECT_EQ(code_of([] { parse_features_response(R"({"dim":1,"features":[["a"]]})", 1); }), ErrorCode::ProtocolViolation);
}

TEST(Http, RemoteErrorCarriesMessage) {
  StubServer stub;
  try {
    http_source_sample(stub.endpoint(), "broken", "p", 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::RemoteError);
    EXPECT_NE(std::string(e.what()).find("model is loading"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("503"), std::string::npos);
  }
}

TEST(Http, TimeoutIsTransportWithElapsedTime) {
  StubServer stub;
  try {
    http_source_sample(stub.endpoint(150), "slow", "p", 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Transport);
    EXPECT_NE(std::string(e.what()).find(" ms"), std::string::npos);
  }
}

TEST(Http, ConnectionRefusedIsTransport) {
  httplib::Server probe;
  const int port = probe.bind_to_any_port("127.0.0.1");
  probe.stop();
  const HttpEndpoint ep{"http://127.0.0.1:" + std::to_string(port), std::chrono::milliseconds(500)};
  EXPECT_EQ(code_of([&] { http_source_sample(ep, "plain", "p", 1); }), ErrorCode::Transport);
}

TEST(Http, SourceTracksDimAcrossCalls) {
  StubServer stub;
  HttpSource src(stub.endpoint(), "shifty");
  EXPECT_FALSE(src.reproducible());
  const Action a{ActionId{1}, "p"};
  EXPECT_EQ(src.sample(a, 2, 1).dim(), 4u);
  EXPECT_EQ(code_of([&] { src.sample(a, 2, 2); }), ErrorCode::ProtocolViolation);
}

TEST(Http, EnvironmentRunsTheAutomaton) {
  StubServer stub;
  const auto env = make_http_environment(stub.endpoint(), "plain", "plain");
  AutomatonConfig c;
  c.r_start = 1;
  c.r_end = 2;
  const auto res = run_prompt_automaton(env, {{ActionId{1}, "a"}, {ActionId{2}, "b"}}, c);
  EXPECT_GE(res.rounds_run, 1u);
  EXPECT_EQ(stub.last_request["model"], "plain");
}
