#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "gml/data.hpp"
#include "gml/error.hpp"
#include "helpers.hpp"

using namespace gml;

namespace {

Dataset balanced_source(std::size_t classes, std::size_t per_class, std::uint64_t seed = 3) {
  SyntheticSpec spec;
  spec.num_classes = classes;
  spec.counts.assign(classes, per_class);
  spec.seed = seed;
  return synth_gaussian_dataset(spec);
}

}  // namespace

TEST_CASE("estimate_prior examples") {
  const std::vector<int> even{0, 0, 1, 1};
  ClassPrior p = estimate_prior(even, 2);
  CHECK(p.p == std::vector<double>{0.5, 0.5});
  CHECK(p.eta[0] == std::log(0.5));

  const std::vector<int> skewed{0, 0, 0, 1};
  p = estimate_prior(skewed, 2);
  CHECK(p.p[0] == 0.75);
  CHECK(p.eta[1] == std::log(0.25));

  const std::vector<int> four{0, 1, 2, 3, 3, 2, 1, 0};
  p = estimate_prior(four, 4);
  CHECK(std::all_of(p.eta.begin(), p.eta.end(), [&](double e) { return e == p.eta[0]; }));

  const std::vector<int> gap{0, 0, 2};
  try {
    estimate_prior(gap, 3);
    FAIL("expected an empty class error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()) == "empty class 1");
  }
  const std::vector<int> out_of_range{0, 3};
  CHECK_THROWS_AS(estimate_prior(out_of_range, 3), ValidationError);
}

TEST_CASE("prior sums to one and eta is log p") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::size_t> counts(1 + rng() % 50);
    for (auto& c : counts) c = 1 + rng() % 1000;
    const ClassPrior p = prior_from_counts(counts);
    CHECK(std::abs(std::accumulate(p.p.begin(), p.p.end(), 0.0) - 1.0) < 1e-12);
    for (std::size_t c = 0; c < counts.size(); ++c) CHECK(p.eta[c] == std::log(p.p[c]));
  }
}

TEST_CASE("exponential profile") {
  CHECK(exponential_profile(5, 40, 1.0) == std::vector<std::size_t>(5, 40));
  CHECK(exponential_profile(3, 100, 100.0) == std::vector<std::size_t>{100, 10, 1});

  // Formula evaluated independently.
  const auto counts = exponential_profile(10, 500, 100.0);
  for (std::size_t c = 0; c < 10; ++c) {
    CHECK(counts[c] == static_cast<std::size_t>(std::llround(500.0 * std::pow(100.0, -static_cast<double>(c) / 9.0))));
  }
  CHECK(counts.front() / counts.back() == 100);
  CHECK(exponential_profile(3, 1, 100.0) == std::vector<std::size_t>{1, 1, 1});
  CHECK_THROWS_AS(exponential_profile(3, 100, 0.5), ValidationError);
}

TEST_CASE("exponential long-tail subsampling") {
  const Dataset src = balanced_source(10, 500);
  std::vector<std::string> warnings;
  const Dataset lt = make_exponential_longtail(src, 100.0, 7, &warnings);
  CHECK(lt.class_counts() == exponential_profile(10, 500, 100.0));
  CHECK(warnings.empty());

  SUBCASE("IF = 1 keeps everything") {
    const Dataset same = make_exponential_longtail(src, 1.0, 7);
    CHECK(same.class_counts() == src.class_counts());
    CHECK(same.sample_ids == src.sample_ids);
  }
  SUBCASE("deterministic per seed") {
    CHECK(make_exponential_longtail(src, 100.0, 7).sample_ids == lt.sample_ids);
    CHECK(make_exponential_longtail(src, 100.0, 8).sample_ids != lt.sample_ids);
  }
  SUBCASE("ids come from the source") {
    const std::set<std::uint64_t> ids(src.sample_ids.begin(), src.sample_ids.end());
    for (auto id : lt.sample_ids) CHECK(ids.count(id) == 1);
  }
  SUBCASE("idempotent on its own output") {
    const Dataset again = make_exponential_longtail(lt, 100.0, 7);
    CHECK(again.sample_ids == lt.sample_ids);
    CHECK(again.inputs == lt.inputs);
  }
  SUBCASE("prior strictly decreasing") {
    const ClassPrior p = estimate_prior(lt.labels, lt.num_classes);
    for (std::size_t c = 1; c < 10; ++c) CHECK(p.p[c] < p.p[c - 1]);
  }
  SUBCASE("zero counts clamp with a warning") {
    const Dataset tiny = balanced_source(3, 1);
    std::vector<std::string> w;
    const Dataset out = make_exponential_longtail(tiny, 100.0, 1, &w);
    CHECK(out.class_counts() == std::vector<std::size_t>{1, 1, 1});
    CHECK_FALSE(w.empty());
  }
  CHECK_THROWS_AS(make_exponential_longtail(src, 0.9, 1), ValidationError);
}

TEST_CASE("pareto profile") {
  const auto counts = pareto_profile(1000, 1280, 6.0);
  CHECK(counts.front() == 1280);
  CHECK(std::is_sorted(counts.rbegin(), counts.rend()));
  // ImageNet-LT spans 1280 down to 5 (ratio 256); same order of magnitude.
  const double ratio = static_cast<double>(counts.front()) / static_cast<double>(counts.back());
  CHECK(ratio > 25.6);
  CHECK(ratio < 2560.0);
  // Larger alpha concentrates mass on the head.
  double previous = 0.0;
  for (double alpha : {0.5, 1.0, 2.0, 4.0, 8.0}) {
    const auto c = pareto_profile(100, 1000, alpha);
    const double share = static_cast<double>(c.front()) / std::accumulate(c.begin(), c.end(), 0.0);
    CHECK(share > previous);
    previous = share;
  }
  CHECK_THROWS_AS(pareto_profile(10, 100, 0.0), ValidationError);

  const Dataset src = balanced_source(20, 60);
  const Dataset lt = make_pareto_longtail(src, 6.0, 2);
  CHECK(lt.class_counts() == pareto_profile(20, 60, 6.0));
}

TEST_CASE("synthetic gaussian dataset") {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.counts = {100, 10, 1};
  spec.seed = 9;
  const Dataset ds = synth_gaussian_dataset(spec);
  ds.validate();
  const ClassPrior p = estimate_prior(ds.labels, 3);
  CHECK(p.p[0] == 100.0 / 111.0);
  CHECK(p.p[1] == 10.0 / 111.0);
  CHECK(p.p[2] == 1.0 / 111.0);

  const Dataset again = synth_gaussian_dataset(spec);
  CHECK(again.inputs == ds.inputs);
  CHECK(again.sample_ids == ds.sample_ids);

  spec.sigma = 0.0;
  CHECK_THROWS_AS(synth_gaussian_dataset(spec), ValidationError);
  spec.sigma = 0.3;
  spec.counts = {1, 2};
  CHECK_THROWS_AS(synth_gaussian_dataset(spec), ValidationError);
}

TEST_CASE("group assignment") {
  const std::vector<std::size_t> counts{150, 50, 5};
  CHECK(assign_groups(counts).assignment == std::vector<Group>{Group::many, Group::medium, Group::few});
  const std::vector<std::size_t> edges{101, 100, 20, 19};
  CHECK(assign_groups(edges).assignment == std::vector<Group>{Group::many, Group::medium, Group::medium, Group::few});
  const std::vector<std::size_t> flat(7, 100);
  const auto g = assign_groups(flat).assignment;
  CHECK(std::all_of(g.begin(), g.end(), [](Group x) { return x == Group::medium; }));
}

TEST_CASE("dataset validation") {
  Dataset ds = balanced_source(2, 3);
  ds.validate();
  Dataset bad = ds;
  bad.labels[0] = 5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = ds;
  bad.sample_ids[1] = bad.sample_ids[0];
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = ds;
  bad.inputs.pop_back();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("csv, cifar and manifest round trips") {
  testutil::TempDir dir("data");
  const Dataset ds = balanced_source(3, 4);
  write_csv_dataset(ds, dir.path() / "a.csv");
  const Dataset back = read_csv_dataset(dir.path() / "a.csv", 3);
  CHECK(back.labels == ds.labels);
  CHECK(back.inputs == ds.inputs);

  Dataset img;
  img.input_shape = {3, 32, 32};
  img.num_classes = 10;
  std::mt19937_64 rng(4);
  for (std::size_t i = 0; i < 5; ++i) {
    img.labels.push_back(static_cast<int>(i * 2));
    img.sample_ids.push_back(i);
    for (std::size_t k = 0; k < 3072; ++k) img.inputs.push_back(static_cast<float>(rng() % 256) / 255.0f);
  }
  write_cifar_batch(img, dir.path() / "b.bin");
  CHECK(std::filesystem::file_size(dir.path() / "b.bin") == 5 * kCifarRecordBytes);
  const std::vector<std::filesystem::path> batches{dir.path() / "b.bin"};
  const Dataset img_back = read_cifar_batches(batches, 10);
  CHECK(img_back.labels == img.labels);
  CHECK(img_back.inputs == img.inputs);
  write_cifar_batch(img_back, dir.path() / "c.bin");
  std::ifstream b1(dir.path() / "b.bin", std::ios::binary), b2(dir.path() / "c.bin", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(b1), {}) == std::string(std::istreambuf_iterator<char>(b2), {}));

  {
    std::ofstream junk(dir.path() / "bad.bin", std::ios::binary);
    junk << "short";
  }
  const std::vector<std::filesystem::path> bad{dir.path() / "bad.bin"};
  CHECK_THROWS_AS(read_cifar_batches(bad, 10), ValidationError);

  DatasetManifest m;
  m.format = "csv";
  m.path = "a.csv";
  m.num_classes = 3;
  m.imbalance_factor = 10.0;
  m.has_seed = true;
  m.seed = 42;
  m.config_hash = "0123456789abcdef";
  m.counts = {4, 4, 4};
  write_manifest(m, dir.path() / "m.json");
  const DatasetManifest r = read_manifest(dir.path() / "m.json");
  CHECK(r.seed == 42);
  CHECK(r.counts == m.counts);
  CHECK(r.config_hash == m.config_hash);
  CHECK(load_manifest_dataset(dir.path() / "m.json").inputs == ds.inputs);
  {
    std::ofstream extra(dir.path() / "x.json");
    extra << R"({"format": "csv", "path": "a.csv", "num_classes": 3, "colour": 1})";
  }
  CHECK_THROWS_AS(read_manifest(dir.path() / "x.json"), ValidationError);
}
