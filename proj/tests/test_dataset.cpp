#include <catch2/catch_amalgamated.hpp>

#include "test_helpers.hpp"

using namespace musle;

TEST_CASE("meta counts are enforced: 1 video with L=4 M=8 T=16 gives 32 tubelets") {
  const DatasetMeta meta{5, 4, 16, 8, 64};
  Dataset ds = testutil::random_dataset(meta, 1, 7);
  REQUIRE(validate(ds).ok());

  const auto dir = testutil::scratch_dir("dataset_counts");
  save_dataset(ds, dir + "/d.jsonl");
  const Dataset back = load_dataset(dir + "/d.jsonl");
  REQUIRE(back.records.size() == 1);
  int tubelets = 0;
  for (const auto& clip : back.records[0].clips) tubelets += static_cast<int>(clip.size());
  REQUIRE(tubelets == 32);
}

TEST_CASE("empty record list with valid meta loads as empty dataset") {
  Dataset ds;
  ds.meta = DatasetMeta{3, 2, 4, 2, 8};
  REQUIRE(validate(ds).ok());
  const auto dir = testutil::scratch_dir("dataset_empty");
  save_dataset(ds, dir + "/d.jsonl");
  const Dataset back = load_dataset(dir + "/d.jsonl");
  REQUIRE(back.records.empty());
  REQUIRE(back.meta == ds.meta);
}

TEST_CASE("a tubelet with T-1 boxes is rejected naming record and tubelet") {
  const DatasetMeta meta{2, 2, 16, 2, 4};
  Dataset ds = testutil::random_dataset(meta, 2, 3);
  ds.records[1].clips[0][1].boxes.pop_back();  // 15 boxes under T=16

  const ValidationReport rep = validate(ds);
  REQUIRE_FALSE(rep.ok());
  REQUIRE(rep.issues.size() == 1);
  REQUIRE(rep.issues[0].record_index == 1);
  REQUIRE(rep.issues[0].location == "clip 0 tubelet 1");

  const auto dir = testutil::scratch_dir("dataset_short_tubelet");
  REQUIRE_THROWS_AS(save_dataset(ds, dir + "/d.jsonl"), DataError);
}

TEST_CASE("save then load is the identity on valid datasets") {
  const auto dir = testutil::scratch_dir("dataset_roundtrip");
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const DatasetMeta meta{3, 2, 5, 3, 6};
    const Dataset ds = testutil::random_dataset(meta, 4, seed);
    const std::string path = dir + "/rt_" + std::to_string(seed) + ".jsonl";
    save_dataset(ds, path);
    const Dataset back = load_dataset(path);
    REQUIRE(datasets_equal(ds, back));

    // and a second save produces identical bytes
    const std::string path2 = dir + "/rt2_" + std::to_string(seed) + ".jsonl";
    save_dataset(back, path2);
    REQUIRE(testutil::files_equal(path, path2));
  }
}

TEST_CASE("non-finite feature values abort the save before writing") {
  const DatasetMeta meta{2, 1, 3, 2, 4};
  Dataset ds = testutil::random_dataset(meta, 1, 11);
  ds.records[0].clips[0][0].visual[1] = std::numeric_limits<double>::quiet_NaN();
  const auto dir = testutil::scratch_dir("dataset_nan");
  const std::string path = dir + "/d.jsonl";
  REQUIRE_THROWS_AS(save_dataset(ds, path), DataError);
  REQUIRE_FALSE(std::filesystem::exists(path));
}

TEST_CASE("validate flags out-of-range scores and degenerate boxes") {
  const DatasetMeta meta{2, 1, 3, 2, 4};

  SECTION("score above one") {
    Dataset ds = testutil::random_dataset(meta, 1, 5);
    ds.records[0].clips[0][0].score = 1.5;
    const ValidationReport rep = validate(ds);
    REQUIRE(rep.issues.size() == 1);
    REQUIRE(rep.issues[0].message.find("score") != std::string::npos);
  }

  SECTION("zero-width box") {
    Dataset ds = testutil::random_dataset(meta, 1, 6);
    ds.records[0].clips[0][1].boxes[2].w = 0.0;
    const ValidationReport rep = validate(ds);
    REQUIRE(rep.issues.size() == 1);
    REQUIRE(rep.issues[0].location == "clip 0 tubelet 1 box 2");
  }

  SECTION("valid dataset gives an empty report") {
    const Dataset ds = testutil::random_dataset(meta, 3, 8);
    REQUIRE(validate(ds).ok());
  }
}

TEST_CASE("loading a missing file reports a data error") {
  REQUIRE_THROWS_AS(load_dataset("/nonexistent/nope.jsonl"), DataError);
}

TEST_CASE("malformed record lines report the line number") {
  const auto dir = testutil::scratch_dir("dataset_malformed");
  const std::string path = dir + "/bad.jsonl";
  {
    std::ofstream out(path);
    out << R"({"num_classes":2,"L":1,"T":2,"M":1,"D_vis":2,"format_version":1})" << "\n";
    out << "{not json}\n";
  }
  try {
    load_dataset(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    REQUIRE(std::string(e.what()).find(":2:") != std::string::npos);
  }
}
