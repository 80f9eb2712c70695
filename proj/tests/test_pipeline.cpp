#include <doctest.h>

#include "misfitlab/core/io.hpp"
#include "misfitlab/errors.hpp"
#include "misfitlab/pipeline.hpp"
#include "support/tempdir.hpp"

using namespace misfitlab;
using nlohmann::json;

TEST_SUITE("pipeline") {

TEST_CASE("config round trip and partial sections") {
  PipelineConfig c;
  c.set_seed(42);
  c.corpus.n_range = {3, 7};
  c.victor.alpha = 0.5;
  c.flip.embed_dim = 32;
  const auto back = pipeline_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.universe.seed == 42);
  CHECK(back.victor.seed == 42);
  CHECK(back.corpus.n_range.min == 3);
  CHECK(back.corpus.n_range.max == 7);

  const auto partial = pipeline_config_from_json(json{{"misfit", {{"m", 4}}}});
  CHECK(partial.misfit.m == 4);
  CHECK(to_json(partial.victor) == to_json(VictorConfig{}));
}

TEST_CASE("config rejects unknown keys and wrong types") {
  CHECK_THROWS_AS(pipeline_config_from_json(json{{"victr", json::object()}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(json{{"victor", {{"layrs", 2}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(json{{"corpus", {{"n_mim", 2}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(json{{"misfit", {{"m", "two"}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(json::array()), ConfigError);

  testing::TempDir dir("pipeline-config");
  core::write_text_file(dir / "bad.json", "{not json");
  CHECK_THROWS_AS(load_pipeline_config(dir / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_pipeline_config(dir / "absent.json"), ConfigError);
}

TEST_CASE("split_samples partitions by split tag") {
  std::vector<OutfitSample> s(5);
  s[0].split = Split::train;
  s[1].split = Split::test;
  s[2].split = Split::valid;
  s[3].split = Split::train;
  s[4].split = Split::test;
  const auto sets = split_samples(s);
  CHECK(sets.train.size() == 2);
  CHECK(sets.valid.size() == 1);
  CHECK(sets.test.size() == 2);
}

TEST_CASE("manifest verification and staleness") {
  testing::TempDir dir("pipeline-manifest");
  core::write_text_file(dir / "a.txt", "alpha");
  RunManifest m;
  m.command = "train-flip";
  m.config = {{"flip", {{"epochs", 3}}}};
  m.seed = 9;
  m.inputs["/data/corpus.json"] = "abc";
  m.outputs["a.txt"] = core::hash_file(dir / "a.txt");
  m.version = "test";

  SUBCASE("missing manifest names the producer") {
    try {
      verified_manifest(dir.path(), "train-flip");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("misfitlab train-flip") != std::string::npos);
    }
    CHECK_FALSE(up_to_date(dir.path(), m));
  }

  write_manifest(dir.path(), m);

  SUBCASE("intact run verifies and round trips") {
    const auto back = verified_manifest(dir.path(), "train-flip");
    CHECK(back.to_json() == m.to_json());
    CHECK(up_to_date(dir.path(), m));
  }

  SUBCASE("wrong producer") {
    CHECK_THROWS_AS(verified_manifest(dir.path(), "extract-features"), DataError);
  }

  SUBCASE("any recipe change makes the run stale") {
    auto other = m;
    other.seed = 10;
    CHECK_FALSE(up_to_date(dir.path(), other));
    other = m;
    other.config["flip"]["epochs"] = 4;
    CHECK_FALSE(up_to_date(dir.path(), other));
    other = m;
    other.inputs["/data/corpus.json"] = "abd";
    CHECK_FALSE(up_to_date(dir.path(), other));
    other = m;
    other.wall_time_s = 123;  // not part of the recipe
    CHECK(up_to_date(dir.path(), other));
  }

  SUBCASE("edited or deleted artifact") {
    core::write_text_file(dir / "a.txt", "alphA");
    CHECK_THROWS_AS(verified_manifest(dir.path(), "train-flip"), DataError);
    CHECK_FALSE(up_to_date(dir.path(), m));
    std::filesystem::remove(dir / "a.txt");
    CHECK_THROWS_AS(verified_manifest(dir.path(), "train-flip"), DataError);
  }

  SUBCASE("corrupt manifest") {
    core::write_text_file(dir / kManifestName, "{\"seed\": 1}");
    CHECK_THROWS_AS(verified_manifest(dir.path(), "train-flip"), ParseError);
  }
}

}  // TEST_SUITE
