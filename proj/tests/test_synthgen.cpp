#include <catch2/catch_amalgamated.hpp>

#include "test_helpers.hpp"

using namespace musle;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig cfg;
  cfg.num_classes = 3;
  cfg.train_per_class = 4;
  cfg.test_per_class = 2;
  cfg.L = 2;
  cfg.T = 6;
  cfg.M = 5;
  cfg.D_vis = 12;
  cfg.distractor_pool_size = 6;
  cfg.motif_sizes = {3, 4, 5};
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("generated counts follow the config") {
  const GeneratorConfig cfg = small_config();
  const SynthOutput out = generate(cfg);
  REQUIRE(out.train.records.size() == static_cast<std::size_t>(cfg.num_classes * cfg.train_per_class));
  REQUIRE(out.test.records.size() == static_cast<std::size_t>(cfg.num_classes * cfg.test_per_class));
  REQUIRE(validate(out.train).ok());
  REQUIRE(validate(out.test).ok());

  // every video has exactly one planted motif of its class size
  for (const auto& rec : out.train.records) {
    const auto& slots = out.truth.slots.at(rec.video_id);
    const int expect = cfg.motif_sizes[static_cast<std::size_t>(rec.label) % cfg.motif_sizes.size()];
    REQUIRE(static_cast<int>(slots.size()) == expect);
    // all in one clip, distinct slots
    std::set<std::pair<int, int>> uniq(slots.begin(), slots.end());
    REQUIRE(uniq.size() == slots.size());
    for (const auto& [c, s] : slots) REQUIRE(c == slots[0].first);
  }
}

TEST_CASE("zero feature noise plants archetypes exactly") {
  GeneratorConfig cfg = small_config();
  cfg.feature_noise_sigma = 0.0;
  const SynthOutput out = generate(cfg);

  // Motif tubelets of two videos of the same class carry identical visual
  // features (same archetype, zero noise). Collect per class from truth.
  const auto& r0 = out.train.records[0];
  const auto& r1 = out.train.records[1];
  REQUIRE(r0.label == r1.label);
  auto motif_features = [&](const VideoRecord& rec) {
    std::vector<std::vector<double>> feats;
    for (const auto& [clip, slot] : out.truth.slots.at(rec.video_id)) {
      feats.push_back(rec.clips[static_cast<std::size_t>(clip)][static_cast<std::size_t>(slot)].visual);
    }
    std::sort(feats.begin(), feats.end());
    return feats;
  };
  REQUIRE(motif_features(r0) == motif_features(r1));
}

TEST_CASE("same seed reproduces the dataset bit for bit, different seeds differ") {
  GeneratorConfig cfg = small_config();
  const SynthOutput a = generate(cfg);
  const SynthOutput b = generate(cfg);
  REQUIRE(datasets_equal(a.train, b.train));
  REQUIRE(datasets_equal(a.test, b.test));
  REQUIRE(a.truth.slots == b.truth.slots);

  cfg.seed = 8;
  const SynthOutput c = generate(cfg);
  REQUIRE_FALSE(datasets_equal(a.train, c.train));
}

TEST_CASE("motif larger than the per-clip budget is rejected") {
  GeneratorConfig cfg = small_config();
  cfg.M = 4;
  cfg.motif_sizes = {5};
  REQUIRE_THROWS_AS(generate(cfg), DataError);
}

TEST_CASE("truth files round-trip") {
  const GeneratorConfig cfg = small_config();
  const SynthOutput out = generate(cfg);
  const auto dir = testutil::scratch_dir("synthgen_truth");
  save_truth(out.truth, dir + "/truth.jsonl");
  const MotifAnnotations back = load_truth(dir + "/truth.jsonl");
  REQUIRE(back.slots == out.truth.slots);
}

TEST_CASE("two-variant classes plant both variants") {
  GeneratorConfig cfg = small_config();
  cfg.num_classes = 1;
  cfg.motif_sizes = {3};
  cfg.variants_per_class = 2;
  cfg.train_per_class = 24;
  cfg.feature_noise_sigma = 0.0;
  const SynthOutput out = generate(cfg);

  std::set<std::vector<std::vector<double>>> signatures;
  for (const auto& rec : out.train.records) {
    std::vector<std::vector<double>> feats;
    for (const auto& [clip, slot] : out.truth.slots.at(rec.video_id)) {
      feats.push_back(rec.clips[static_cast<std::size_t>(clip)][static_cast<std::size_t>(slot)].visual);
    }
    std::sort(feats.begin(), feats.end());
    signatures.insert(feats);
  }
  REQUIRE(signatures.size() == 2);
}
