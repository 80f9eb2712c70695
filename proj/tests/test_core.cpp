#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "misfitlab/core/adam.hpp"
#include "misfitlab/core/init.hpp"
#include "misfitlab/core/ops.hpp"
#include "misfitlab/core/weights.hpp"
#include "support/gradcheck.hpp"

using namespace misfitlab;
using namespace misfitlab::core;
using Mat = Matrix<double>;

namespace {

Mat random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

Mat from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (auto row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

// Weighted sum gives every output element a distinct upstream gradient.
Var<double> probe_loss(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = y.graph->constant(random_matrix(y.rows(), y.cols(), rng));
  return sum(mul(y, w));
}

}  // namespace

TEST_SUITE("numeric-core") {

TEST_CASE("matmul values") {
  Graph<double> g;
  auto id = g.constant(from_rows({{1, 0}, {0, 1}}));
  auto b = g.constant(from_rows({{3, 4}, {5, 6}}));
  CHECK(matmul(id, b).value() == from_rows({{3, 4}, {5, 6}}));

  auto row = g.constant(from_rows({{1, 2}}));
  auto col = g.constant(from_rows({{3}, {4}}));
  CHECK(matmul(row, col).value()(0, 0) == 11.0);

  std::mt19937_64 rng(7);
  const Mat a = random_matrix(3, 4, rng), c = random_matrix(4, 2, rng);
  auto out = matmul(g.constant(a), g.constant(c)).value();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double acc = 0;
      for (int t = 0; t < 4; ++t) acc += a(i, t) * c(t, j);
      CHECK(std::abs(out(i, j) - acc) < 1e-12);
    }
}

TEST_CASE("matmul shape error names both shapes") {
  Graph<double> g;
  auto a = g.constant(Mat::Zero(2, 3));
  auto b = g.constant(Mat::Zero(2, 3));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find(" x [2x3]") != std::string::npos);
  }
}

TEST_CASE("layernorm") {
  Graph<double> g;
  auto ones3 = g.constant(Mat::Ones(1, 3));
  auto zeros3 = g.constant(Mat::Zero(1, 3));
  auto y = layernorm(g.constant(from_rows({{1, 1, 1}})), ones3, zeros3);
  CHECK(y.value().cwiseAbs().maxCoeff() == 0.0);

  auto y2 = layernorm(g.constant(from_rows({{1, 3}})), g.constant(Mat::Ones(1, 2)), g.constant(Mat::Zero(1, 2)));
  CHECK(y2.value()(0, 0) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y2.value()(0, 1) == doctest::Approx(1.0).epsilon(1e-5));

  std::mt19937_64 rng(3);
  auto y3 = layernorm(g.constant(random_matrix(2, 8, rng, 10.0)), g.constant(Mat::Ones(1, 8)),
                      g.constant(Mat::Zero(1, 8)));
  for (int r = 0; r < 2; ++r) {
    const double mu = y3.value().row(r).mean();
    const double var = (y3.value().row(r).array() - mu).square().mean();
    CHECK(std::abs(mu) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }

  CHECK_THROWS_AS(layernorm(g.constant(Mat::Zero(2, 4)), ones3, zeros3), DimensionError);
}

TEST_CASE("gelu") {
  Graph<double> g;
  auto y = gelu(g.constant(from_rows({{0.0, 30.0, -30.0, 1.0}}))).value();
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 1) == doctest::Approx(30.0));
  CHECK(std::abs(y(0, 2)) < 1e-12);
  // x·Φ(x) at x = 1 via the error function.
  const double exact = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  CHECK(std::abs(y(0, 3) - exact) < 1e-3);
}

TEST_CASE("softmax, sigmoid, dropout") {
  Graph<double> g;
  auto s = softmax_rows(g.constant(Mat::Zero(1, 2))).value();
  CHECK(s(0, 0) == 0.5);
  CHECK(s(0, 1) == 0.5);
  CHECK(sigmoid(g.constant(Mat::Zero(1, 1))).value()(0, 0) == 0.5);

  std::mt19937_64 rng(11);
  const Mat big = random_matrix(16, 9, rng, 10.0);
  auto sm = softmax_rows(g.constant(big)).value();
  for (int r = 0; r < sm.rows(); ++r) CHECK(std::abs(sm.row(r).sum() - 1.0) <= 1e-12);

  auto sg = sigmoid(g.constant(big)).value();
  CHECK(sg.minCoeff() > 0.0);
  CHECK(sg.maxCoeff() < 1.0);

  auto x = g.constant(random_matrix(4, 4, rng));
  auto same = dropout(x, 0.2, false, rng);
  CHECK(same.id == x.id);
  CHECK(same.value() == x.value());
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), ContractError);
  CHECK_THROWS_AS(dropout(x, -0.1, false, rng), ContractError);

  auto ones = g.constant(Mat::Ones(200, 200));
  auto dropped = dropout(ones, 0.2, true, rng).value();
  const double zero_frac = (dropped.array() == 0.0).cast<double>().mean();
  CHECK(zero_frac == doctest::Approx(0.2).epsilon(0.05));
  CHECK(dropped.maxCoeff() == doctest::Approx(1.25));
}

TEST_CASE("backward basics") {
  Parameter<double> p("x", from_rows({{1, -2, 3}, {0.5, 4, -1}}));
  {
    Graph<double> g;
    g.backward(sum(g.parameter(p)));
    CHECK(p.grad == Mat::Ones(2, 3));
  }
  p.zero_grad();
  {
    Graph<double> g;
    auto x = g.parameter(p);
    g.backward(sum(mul(x, x)));
    CHECK(p.grad == 2.0 * p.value);
  }
  {
    Graph<double> g;
    auto x = g.parameter(p);
    CHECK_THROWS_AS(g.backward(mul(x, x)), ContractError);
  }
}

TEST_CASE("unreachable gradients are untouched") {
  Parameter<double> used("used", Mat::Ones(1, 2));
  Parameter<double> unused("unused", Mat::Ones(1, 2));
  unused.grad.setConstant(7.0);
  Graph<double> g;
  auto a = g.parameter(used);
  auto b = g.parameter(unused);
  auto side = sum(b);  // on the tape, not an ancestor of the loss
  (void)side;
  g.backward(sum(a));
  CHECK(unused.grad == Mat::Constant(1, 2, 7.0));
  CHECK(g.grad(b).size() == 0);
}

TEST_CASE("op gradients match central differences") {
  std::mt19937_64 rng(2024);
  Parameter<double> a("a", random_matrix(3, 4, rng));
  Parameter<double> b("b", random_matrix(4, 5, rng));
  Parameter<double> bias("bias", random_matrix(1, 5, rng));
  Parameter<double> c("c", random_matrix(3, 4, rng));
  Parameter<double> gam("gamma", random_matrix(1, 4, rng));
  Parameter<double> bet("beta", random_matrix(1, 4, rng));
  Parameter<double> s("s", Mat::Constant(1, 1, 0.7));
  Parameter<double> sq("sq", random_matrix(4, 4, rng));

  auto expect_ok = [](const char* name, const testing::GradCheckResult& r) {
    INFO(name << " worst: " << r.worst);
    CHECK(r.max_rel_error < 1e-4);
  };

  std::vector<Parameter<double>*> ab{&a, &b, &bias};
  expect_ok("matmul", testing::check_gradients([&](Graph<double>& g) { return probe_loss(matmul(g.parameter(a), g.parameter(b)), 1); }, ab));
  expect_ok("linear", testing::check_gradients([&](Graph<double>& g) {
    return probe_loss(linear(g.parameter(a), g.parameter(b), g.parameter(bias)), 2);
  }, ab));

  std::vector<Parameter<double>*> ac{&a, &c};
  expect_ok("add/sub/mul", testing::check_gradients([&](Graph<double>& g) {
    auto x = g.parameter(a), y = g.parameter(c);
    return probe_loss(mul(add(x, y), sub(x, scale(y, 0.5))), 3);
  }, ac));

  std::vector<Parameter<double>*> ln{&a, &gam, &bet};
  expect_ok("layernorm", testing::check_gradients([&](Graph<double>& g) {
    return probe_loss(layernorm(g.parameter(a), g.parameter(gam), g.parameter(bet)), 4);
  }, ln));

  std::vector<Parameter<double>*> single{&a};
  expect_ok("gelu", testing::check_gradients([&](Graph<double>& g) { return probe_loss(gelu(g.parameter(a)), 5); }, single));
  expect_ok("sigmoid", testing::check_gradients([&](Graph<double>& g) { return probe_loss(sigmoid(g.parameter(a)), 6); }, single));
  expect_ok("softmax", testing::check_gradients([&](Graph<double>& g) { return probe_loss(softmax_rows(g.parameter(a)), 7); }, single));
  expect_ok("exp/mean", testing::check_gradients([&](Graph<double>& g) { return mean(exp(g.parameter(a))); }, single));
  expect_ok("transpose", testing::check_gradients([&](Graph<double>& g) { return probe_loss(transpose(g.parameter(a)), 8); }, single));
  expect_ok("l2_normalize_rows", testing::check_gradients([&](Graph<double>& g) {
    return probe_loss(l2_normalize_rows(g.parameter(a)), 9);
  }, single));
  expect_ok("gather_rows", testing::check_gradients([&](Graph<double>& g) {
    return probe_loss(gather_rows(g.parameter(a), {2, 0, 2, 1}), 10);
  }, single));
  expect_ok("concat", testing::check_gradients([&](Graph<double>& g) {
    auto x = g.parameter(a), y = g.parameter(c);
    return add(probe_loss(concat_rows(x, y), 11), probe_loss(concat_cols(x, y), 12));
  }, ac));

  std::vector<Parameter<double>*> sc{&a, &s};
  expect_ok("scalar_mul", testing::check_gradients([&](Graph<double>& g) {
    return probe_loss(scalar_mul(g.parameter(a), exp(g.parameter(s))), 13);
  }, sc));

  std::vector<Parameter<double>*> square{&sq};
  expect_ok("cross_entropy_diagonal", testing::check_gradients([&](Graph<double>& g) {
    auto z = g.parameter(sq);
    return add(cross_entropy_diagonal(z), cross_entropy_diagonal(transpose(z)));
  }, square));

  const Mat target = Mat::Random(3, 4).cwiseAbs();
  expect_ok("mse", testing::check_gradients([&](Graph<double>& g) { return mse_loss(g.parameter(a), target); }, single));
  expect_ok("bce", testing::check_gradients([&](Graph<double>& g) { return bce_loss(sigmoid(g.parameter(a)), target); }, single));

  // Dropout with a frozen mask: reseed for every evaluation.
  expect_ok("dropout", testing::check_gradients([&](Graph<double>& g) {
    std::mt19937_64 local(99);
    return probe_loss(dropout(g.parameter(a), 0.3, true, local), 14);
  }, single));
}

TEST_CASE("segment attention gradient and isolation") {
  std::mt19937_64 rng(5);
  const int heads = 2;
  Parameter<double> qkv("qkv", random_matrix(7, 3 * 4, rng));
  std::vector<Segment> segs{{0, 3}, {3, 4}};
  std::vector<Parameter<double>*> ps{&qkv};
  auto r = testing::check_gradients([&](Graph<double>& g) {
    return probe_loss(segment_self_attention(g.parameter(qkv), segs, heads), 21);
  }, ps);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);

  // Perturbing the second segment leaves the first segment's output unchanged.
  Graph<double> g;
  auto base = segment_self_attention(g.constant(qkv.value), segs, heads).value();
  Mat changed = qkv.value;
  changed.bottomRows(4).array() += 1.0;
  auto other = segment_self_attention(g.constant(changed), segs, heads).value();
  CHECK(base.topRows(3) == other.topRows(3));

  // Dense reference for one segment and one head.
  const Mat m = qkv.value.topRows(3);
  const Mat q = m.block(0, 0, 3, 2), k = m.block(0, 4, 3, 2), v = m.block(0, 8, 3, 2);
  const Mat p = softmax_rows_value<double>((q * k.transpose()) / std::sqrt(2.0));
  const Mat ref = p * v;
  CHECK((base.block(0, 0, 3, 2) - ref).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("conv, pooling and embedding gradients") {
  std::mt19937_64 rng(8);
  const ImageGeometry geo{2, 4, 4};
  Parameter<double> img("img", random_matrix(2, geo.size(), rng));
  Parameter<double> w("w", random_matrix(3, 2 * 9, rng, 0.5));
  Parameter<double> b("b", random_matrix(1, 3, rng));
  std::vector<Parameter<double>*> ps{&img, &w, &b};
  auto r = testing::check_gradients([&](Graph<double>& g) {
    auto y = conv2d(g.parameter(img), g.parameter(w), g.parameter(b), geo, 3);
    return probe_loss(avg_pool2(y, ImageGeometry{3, 4, 4}), 31);
  }, ps);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);

  // A centred delta kernel reproduces its input channel.
  Graph<double> g;
  Mat delta = Mat::Zero(1, 2 * 9);
  delta(0, 4) = 1.0;
  auto y = conv2d(g.constant(img.value), g.constant(delta), g.constant(Mat::Zero(1, 1)), geo, 3).value();
  CHECK((y - img.value.leftCols(16)).cwiseAbs().maxCoeff() == 0.0);

  Parameter<double> table("table", random_matrix(6, 3, rng));
  std::vector<Parameter<double>*> tp{&table};
  std::vector<std::vector<int>> bags{{0, 2, 2}, {5}, {1, 3}};
  auto re = testing::check_gradients([&](Graph<double>& g) {
    return probe_loss(embedding_mean(g.parameter(table), bags), 32);
  }, tp);
  CHECK(re.max_rel_error < 1e-4);
  Graph<double> g2;
  CHECK_THROWS_AS(embedding_mean(g2.constant(table.value), {{6}}), DimensionError);
}

TEST_CASE("lr schedule and adam") {
  CHECK(lr_schedule(0) == 1e-4);
  CHECK(lr_schedule(9) == 1e-4);
  CHECK(lr_schedule(10) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(lr_schedule(19) == doctest::Approx(1e-5).epsilon(1e-12));

  Parameter<double> w("w", Mat::Constant(1, 1, 1.0));
  std::vector<Parameter<double>*> ps{&w};
  AdamState<double> st(ps, 1e-2);
  for (int i = 0; i < 3; ++i) {
    const double before = std::abs(w.value(0, 0));
    w.zero_grad();
    Graph<double> g;
    auto x = g.parameter(w);
    g.backward(sum(mul(x, x)));
    adam_step<double>(ps, st);
    CHECK(std::abs(w.value(0, 0)) < before);
  }
  CHECK(st.step_count == 3);
  CHECK_THROWS_AS(AdamState<double>(ps, 0.0), ContractError);
}

TEST_CASE("tape determinism") {
  auto run = [] {
    std::mt19937_64 rng(42);
    Graph<double> g;
    auto x = g.constant(random_matrix(5, 6, rng));
    auto w = g.constant(xavier_uniform<double>(6, 6, rng));
    auto y = dropout(gelu(matmul(x, w)), 0.2, true, rng);
    return softmax_rows(y).value();
  };
  const Mat a = run(), b = run();
  CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

TEST_CASE("weight container round trip") {
  std::mt19937_64 rng(1);
  Parameter<double> p1("layer.w", random_matrix(3, 5, rng));
  Parameter<double> p2("layer.b", random_matrix(1, 5, rng));
  const auto path = std::filesystem::temp_directory_path() / "misfitlab_weights_test.bin";
  std::vector<const Parameter<double>*> cps{&p1, &p2};
  save_weights(path, cps, {{"note", "x"}});

  auto file = read_weight_file(path);
  CHECK(file.metadata["note"] == "x");
  REQUIRE(file.tensors.size() == 2);
  Parameter<double> q1("layer.w", Mat::Zero(3, 5)), q2("layer.b", Mat::Zero(1, 5));
  std::vector<Parameter<double>*> qs{&q1, &q2};
  assign_weights(file, qs);
  CHECK(q1.value == p1.value);
  CHECK(q2.value == p2.value);

  std::vector<const Parameter<double>*> cqs{&q1, &q2};
  CHECK(weights_hash(cps) == weights_hash(cqs));

  Parameter<double> wrong("layer.w", Mat::Zero(5, 3));
  std::vector<Parameter<double>*> ws{&wrong};
  CHECK_THROWS_AS(assign_weights(file, ws), DimensionError);
  std::filesystem::remove(path);
}

}  // TEST_SUITE
