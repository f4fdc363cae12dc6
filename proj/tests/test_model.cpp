#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "tailseg/model.hpp"
#include "tailseg/rng.hpp"
#include "tailseg/synthdata.hpp"

using namespace tailseg;

namespace {

Scene make_scene(std::vector<std::array<double, 3>> pts,
                 std::vector<std::size_t> labels) {
  Scene s;
  s.points = Tensor(pts.size(), 3);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t d = 0; d < 3; ++d) s.points(i, d) = pts[i][d];
  s.gt_labels = labels;
  std::size_t cmax = 0;
  for (std::size_t l : labels) cmax = std::max(cmax, l);
  s.class_counts.assign(cmax + 1, 0);
  for (std::size_t l : labels) s.class_counts[l]++;
  return s;
}

// independent neighbor oracle: full sort of (distance, index) pairs
NeighborIndex brute_knn(const Scene& scene, std::size_t K) {
  const std::size_t N = scene.point_count();
  const std::size_t k = std::min(K, N - 1);
  NeighborIndex nn(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      double d2 = 0;
      for (std::size_t d = 0; d < 3; ++d) {
        const double diff = scene.points(i, d) - scene.points(j, d);
        d2 += diff * diff;
      }
      all.emplace_back(d2, j);
    }
    std::sort(all.begin(), all.end());
    for (std::size_t m = 0; m < k; ++m) nn[i].push_back(all[m].second);
  }
  return nn;
}

}  // namespace

TEST_CASE("knn on collinear points breaks the middle tie to the lower index") {
  const Scene s = make_scene({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}}, {0, 0, 0});
  const NeighborIndex nn = build_knn(s, 1);
  CHECK(nn[0] == std::vector<std::size_t>{1});
  CHECK(nn[1] == std::vector<std::size_t>{0});
  CHECK(nn[2] == std::vector<std::size_t>{1});
}

TEST_CASE("oversized K returns every other point") {
  const Scene s = make_scene({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}, {0, 0, 0});
  const NeighborIndex nn = build_knn(s, 100);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(nn[i].size() == 2);
    CHECK(std::find(nn[i].begin(), nn[i].end(), i) == nn[i].end());
  }
}

TEST_CASE("duplicate coordinates never pick the point itself") {
  const Scene s = make_scene({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}}, {0, 0, 0});
  const NeighborIndex nn = build_knn(s, 2);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(std::find(nn[i].begin(), nn[i].end(), i) == nn[i].end());
  // ties among equal distances resolve to ascending indices
  CHECK(nn[2] == std::vector<std::size_t>{0, 1});
}

TEST_CASE("knn rejects degenerate requests") {
  const Scene s = make_scene({{0, 0, 0}, {1, 0, 0}}, {0, 0});
  CHECK_THROWS_AS(build_knn(s, 0), std::invalid_argument);
  const Scene single = make_scene({{0, 0, 0}}, {0});
  CHECK_THROWS_AS(build_knn(single, 1), std::invalid_argument);
}

TEST_CASE("knn agrees with a full-sort oracle on random scenes") {
  SceneConfig cfg;
  cfg.class_count = 3;
  cfg.points_per_head = 40;
  cfg.imbalance_ratio = 4.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    cfg.seed = seed;
    const Scene scene = generate_scene(cfg);
    CHECK(build_knn(scene, 5) == brute_knn(scene, 5));
    CHECK(build_knn(scene, 16) == brute_knn(scene, 16));
  }
}

TEST_CASE("augmented inputs carry own and mean neighbor coordinates") {
  const Scene s = make_scene({{0, 0, 0}, {1, 0, 0}, {0, 2, 0}}, {0, 0, 0});
  const NeighborIndex nn = build_knn(s, 2);
  const Tensor aug = augmented_inputs(s, nn);
  REQUIRE(aug.shape() == Shape{3, 6});
  CHECK(aug(1, 0) == 1.0);
  // point 0's neighbors are 1 and 2: mean (0.5, 1, 0)
  CHECK(aug(0, 3) == 0.5);
  CHECK(aug(0, 4) == 1.0);
  CHECK(aug(0, 5) == 0.0);
}

TEST_CASE("zero backbone weights give zero features") {
  const Scene s = make_scene({{0, 0, 0}, {1, 0, 0}}, {0, 1});
  BackboneParams p;
  p.W1 = Tensor(6, 4);
  p.b1 = Tensor(1, 4);
  p.W2 = Tensor(4, 4);
  p.b2 = Tensor(1, 4);
  const Tensor f = extract_features(p, s, build_knn(s, 1));
  CHECK(f == Tensor(2, 4, 0.0));
}

TEST_CASE("hand-computed two point backbone") {
  const Scene s = make_scene({{0, 0, 0}, {1, 0, 0}}, {0, 1});
  BackboneParams p;
  p.W1 = Tensor(6, 2);
  p.W1(0, 0) = 1.0;
  p.W1(3, 0) = -2.0;
  p.W1(0, 1) = 0.5;
  p.b1 = Tensor{{0.25, -0.25}};
  p.W2 = Tensor{{1.0, 0.0}, {1.0, 1.0}};
  p.b2 = Tensor{{0.1, 0.0}};
  const Tensor f = extract_features(p, s, build_knn(s, 1));
  // row 0: preact [-1.75, -0.25] -> relu 0 -> second layer [0.1, 0]
  // row 1: preact [1.25, 0.25] -> [1.25+0.25+0.1, 0.25] = [1.6, 0.25]
  CHECK(f(0, 0) == Catch::Approx(0.1).epsilon(1e-15));
  CHECK(f(0, 1) == 0.0);
  CHECK(f(1, 0) == Catch::Approx(1.6).epsilon(1e-15));
  CHECK(f(1, 1) == Catch::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("permuting point order permutes feature rows") {
  SceneConfig cfg;
  cfg.class_count = 2;
  cfg.points_per_head = 25;
  cfg.imbalance_ratio = 1.0;
  cfg.seed = 6;
  const Scene scene = generate_scene(cfg);
  const ModelParams mp = init_model(2, 8, 42);
  const Tensor f = extract_features(mp.backbone, scene, build_knn(scene, 4));

  // reverse the point order
  const std::size_t N = scene.point_count();
  Scene rev = scene;
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t d = 0; d < 3; ++d)
      rev.points(i, d) = scene.points(N - 1 - i, d);
    rev.gt_labels[i] = scene.gt_labels[N - 1 - i];
  }
  const Tensor g = extract_features(mp.backbone, rev, build_knn(rev, 4));
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t h = 0; h < 8; ++h) CHECK(g(i, h) == f(N - 1 - i, h));
}

TEST_CASE("zero classifier weights predict the uniform distribution") {
  ClassifierParams p;
  p.Wc = Tensor(3, 4);
  p.bc = Tensor(1, 4);
  Tensor features(5, 3, 0.7);
  const Tensor probs = predict_probs(p, features);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(probs(i, c) == Catch::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("softmax of known logits") {
  ClassifierParams p;
  p.Wc = Tensor{{std::log(2.0), 0.0}};
  p.bc = Tensor{{0.0, 0.0}};
  const Tensor probs = predict_probs(p, Tensor{{1.0}});
  CHECK(probs(0, 0) == Catch::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(probs(0, 1) == Catch::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("probability rows are stochastic for random parameters") {
  Rng rng(2718);
  const ModelParams mp = init_model(5, 16, 17);
  Tensor features(20, 16);
  for (double& v : features.values()) v = rng.uniform(-2.0, 2.0);
  const Tensor probs = predict_probs(mp.classifier, features);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < probs.cols(); ++c) {
      CHECK(probs(i, c) > 0.0);
      CHECK(probs(i, c) < 1.0);
      sum += probs(i, c);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("init respects glorot bounds and is seed deterministic") {
  const ModelParams a = init_model(4, 32, 9);
  const ModelParams b = init_model(4, 32, 9);
  CHECK(a.backbone.W1 == b.backbone.W1);
  CHECK(a.classifier.Wc == b.classifier.Wc);
  const double bound1 = std::sqrt(6.0 / (6 + 32));
  for (double v : a.backbone.W1.values()) CHECK(std::abs(v) <= bound1);
  CHECK(a.backbone.b1 == Tensor(1, 32, 0.0));

  const ModelParams c = init_model(4, 32, 10);
  CHECK_FALSE(a.backbone.W1 == c.backbone.W1);
}

TEST_CASE("frozen groups never appear among trainable parameters") {
  const Scene s = make_scene({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}, {0, 1, 1});
  const ModelParams mp = init_model(2, 4, 1);
  const Tensor aug = augmented_inputs(s, build_knn(s, 2));

  // backbone trainable, classifier frozen
  {
    Tape tape;
    std::vector<NodeId> bb_ids;
    const NodeId f = append_backbone(tape, aug, mp.backbone, true, &bb_ids);
    const NodeId logits = append_classifier(tape, f, mp.classifier, false);
    tape.softmax_cross_entropy(logits, {{0, 0}, {1, 1}, {2, 1}}, 3.0);
    tape.forward(backbone_tensors(mp.backbone));
    const GradientSet g = tape.backward();
    REQUIRE(g.parameter_ids().size() == 4);
    CHECK(std::equal(bb_ids.begin(), bb_ids.end(), g.parameter_ids().begin()));
    double norm = 0.0;
    for (NodeId id : bb_ids) norm += g.at(id).frobenius_norm();
    CHECK(norm > 0.0);
  }
  // classifier trainable, backbone frozen
  {
    Tape tape;
    std::vector<NodeId> cls_ids;
    const NodeId f = append_backbone(tape, aug, mp.backbone, false);
    const NodeId logits = append_classifier(tape, f, mp.classifier, true, &cls_ids);
    tape.softmax_cross_entropy(logits, {{0, 0}, {1, 1}, {2, 1}}, 3.0);
    tape.forward(classifier_tensors(mp.classifier));
    const GradientSet g = tape.backward();
    REQUIRE(g.parameter_ids().size() == 2);
    CHECK(std::equal(cls_ids.begin(), cls_ids.end(), g.parameter_ids().begin()));
    CHECK(g.at(cls_ids[0]).frobenius_norm() > 0.0);
  }
}

TEST_CASE("checkpoint bytes round trip exactly") {
  const ModelParams p = init_model(5, 12, 33);
  const auto bytes = checkpoint_bytes(p, 16);
  std::size_t K = 0;
  const ModelParams back = checkpoint_from_bytes(bytes, &K);
  CHECK(K == 16);
  CHECK(back.backbone.W1 == p.backbone.W1);
  CHECK(back.backbone.b1 == p.backbone.b1);
  CHECK(back.backbone.W2 == p.backbone.W2);
  CHECK(back.backbone.b2 == p.backbone.b2);
  CHECK(back.classifier.Wc == p.classifier.Wc);
  CHECK(back.classifier.bc == p.classifier.bc);
}

TEST_CASE("checkpoint corruption is reported") {
  const ModelParams p = init_model(3, 8, 1);
  auto bytes = checkpoint_bytes(p, 4);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(checkpoint_from_bytes(bad_magic), std::runtime_error);

  auto bad_version = bytes;
  bad_version[8] = 99;
  CHECK_THROWS_AS(checkpoint_from_bytes(bad_version), std::runtime_error);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 9);
  CHECK_THROWS_AS(checkpoint_from_bytes(truncated), std::runtime_error);
}

TEST_CASE("checkpoint files round trip through disk") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "tailseg_model_ckpt.bin";
  const ModelParams p = init_model(4, 6, 77);
  save_checkpoint(path.string(), p, 8);
  std::size_t K = 0;
  const ModelParams back = load_checkpoint(path.string(), &K);
  CHECK(K == 8);
  CHECK(back.classifier.Wc == p.classifier.Wc);
  fs::remove(path);
}
