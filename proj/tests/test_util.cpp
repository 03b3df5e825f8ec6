#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <random>

#include "arml/kvdoc.hpp"
#include "arml/numeric.hpp"
#include "arml/param_vector.hpp"
#include "arml/rng.hpp"

using namespace arml;

TEST_CASE("rng determinism and ranges") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng r(7);
  for (int i = 0; i < 10000; ++i) {
    double u = r.u01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("rng uniform moments") {
  Rng r(123);
  double sum = 0, sum2 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    double x = r.uniform(2.0, 6.0);
    sum += x;
    sum2 += x * x;
  }
  double mean = sum / n;
  double var = sum2 / n - mean * mean;
  CHECK(mean == doctest::Approx(4.0).epsilon(0.01));
  CHECK(var == doctest::Approx(16.0 / 12.0).epsilon(0.05));
}

TEST_CASE("rng normal moments") {
  Rng r(99);
  double sum = 0, sum2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double x = r.normal(1.5, 2.0);
    sum += x;
    sum2 += x * x;
  }
  double mean = sum / n;
  double var = sum2 / n - mean * mean;
  CHECK(mean == doctest::Approx(1.5).epsilon(0.02));
  CHECK(var == doctest::Approx(4.0).epsilon(0.03));
}

TEST_CASE("mix_seed decouples streams") {
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(mix_seed(1, 2, 3) != mix_seed(1, 3, 2));
}

TEST_CASE("stable_mean is permutation invariant and exact on constants") {
  std::vector<double> xs = {0.1, 0.7, -0.3, 1e-9, 5.5, 3.1415, -2.2};
  double ref = stable_mean(xs);
  std::mt19937 g(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::shuffle(xs.begin(), xs.end(), g);
    CHECK(stable_mean(xs) == ref);
  }
  std::vector<double> constant(13, 0.7310585);
  CHECK(stable_mean(constant) == 0.7310585);
}

TEST_CASE("pairwise mean of 2^k equal vectors is exact") {
  Eigen::VectorXd v(3);
  v << 0.1, -7.3, 1e-7;
  std::vector<Eigen::VectorXd> vs(16, v);
  CHECK(mean_vectors(vs) == v);
}

TEST_CASE("kvdoc round-trips doubles bit-exactly") {
  Rng r(5);
  io::KvDoc doc;
  std::vector<double> vals;
  for (int i = 0; i < 200; ++i) {
    double x = (r.u01() - 0.5) * std::pow(10.0, r.uniform(-12, 12));
    vals.push_back(x);
    doc.set_double("k" + std::to_string(i), x);
  }
  io::KvDoc parsed = io::KvDoc::parse(doc.serialize());
  for (int i = 0; i < 200; ++i)
    CHECK(parsed.get_double("k" + std::to_string(i)) == vals[i]);
}

TEST_CASE("kvdoc vectors, comments, errors") {
  io::KvDoc doc = io::KvDoc::parse(
      "# comment\n"
      "name = hello world\n"
      "vec = 1.5 -2.25 0.125\n"
      "count = 12\n");
  CHECK(doc.get("name") == "hello world");
  Eigen::VectorXd v = doc.get_vector("vec");
  REQUIRE(v.size() == 3);
  CHECK(v[1] == -2.25);
  CHECK(doc.get_int("count") == 12);
  CHECK_THROWS(doc.get("missing"));
  CHECK_THROWS(doc.get_int("name"));
  CHECK_THROWS(io::KvDoc::parse("no equals sign here\n"));
}

TEST_CASE("param vector flatten/unflatten is the identity") {
  Rng r(17);
  std::vector<Eigen::MatrixXd> ts;
  ts.push_back(Eigen::MatrixXd::Random(3, 4));
  ts.push_back(Eigen::MatrixXd::Random(1, 1));
  ts.push_back(Eigen::MatrixXd::Random(5, 2));
  ParamVector pv = ParamVector::flatten(ts);
  CHECK(pv.size() == 3 * 4 + 1 + 5 * 2);
  auto back = pv.unflatten();
  REQUIRE(back.size() == ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) CHECK(back[i] == ts[i]);
}
