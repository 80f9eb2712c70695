#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

#include "misfitlab/catalog.hpp"
#include "misfitlab/core/io.hpp"
#include "misfitlab/errors.hpp"
#include "support/tempdir.hpp"

using namespace misfitlab;

TEST_SUITE("catalog") {

TEST_CASE("universe cardinality and determinism") {
  UniverseConfig cfg;
  cfg.seed = 17;
  const auto a = generate_universe(cfg);
  CHECK(a.catalog.size() == 1600);
  CHECK(a.catalog.category_count() == 8);
  const auto b = generate_universe(cfg);
  CHECK(a.catalog == b.catalog);
  CHECK(a.latents == b.latents);

  cfg.seed = 18;
  CHECK_FALSE(generate_universe(cfg).catalog == a.catalog);

  for (const auto& g : a.catalog.garments()) {
    REQUIRE(g.image);
    CHECK(g.image->pixels.size() == 3u * 32 * 32);
    CHECK(g.text_tokens.size() == 4);
    CHECK(g.text_tokens[0] == g.category_id);
  }
}

TEST_CASE("latents are recoverable by nearest centroid") {
  UniverseConfig cfg;
  cfg.seed = 3;
  const auto u = generate_universe(cfg);
  std::size_t correct = 0;
  const auto garments = u.catalog.garments();
  for (std::size_t i = 0; i < garments.size(); ++i) {
    Eigen::Index best = 0;
    (u.centroids.rowwise() - u.latents.row(static_cast<Eigen::Index>(i))).rowwise().squaredNorm().minCoeff(&best);
    correct += static_cast<int>(best) == *garments[i].archetype;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(garments.size()) >= 0.99);
}

TEST_CASE("separability violation is a config error") {
  UniverseConfig cfg;
  cfg.noise_sigma = 5.0;
  CHECK_THROWS_AS(generate_universe(cfg), ConfigError);
}

TEST_CASE("compatible outfit sampling") {
  UniverseConfig cfg;
  cfg.seed = 5;
  const auto u = generate_universe(cfg);
  std::mt19937_64 rng(9);
  const auto outfits = sample_compatible_outfits(u.catalog, 1000, {3, 8}, rng);
  REQUIRE(outfits.size() == 1000);

  double within = 0;
  std::size_t within_n = 0;
  std::unordered_map<std::string, Eigen::Index> row_of;
  for (std::size_t i = 0; i < u.catalog.size(); ++i) row_of[u.catalog.garments()[i].id] = static_cast<Eigen::Index>(i);
  for (const auto& o : outfits) {
    CHECK(o.t_ocr == 1.0);
    CHECK(o.size() >= 3);
    CHECK(o.size() <= 8);
    std::set<int> cats, archs;
    for (const auto& id : o.garment_ids) {
      cats.insert(u.catalog.at(id).category_id);
      archs.insert(*u.catalog.at(id).archetype);
    }
    CHECK(cats.size() == o.size());
    CHECK(archs.size() == 1);
    for (auto v : o.t_mid) CHECK(v == 0);
    for (std::size_t i = 0; i < o.size(); ++i)
      for (std::size_t j = i + 1; j < o.size(); ++j) {
        within += (u.latents.row(row_of[o.garment_ids[i]]) - u.latents.row(row_of[o.garment_ids[j]])).norm();
        ++within_n;
      }
  }
  // Monte-Carlo baseline over random garment pairs.
  std::uniform_int_distribution<Eigen::Index> pick(0, u.latents.rows() - 1);
  double across = 0;
  const int pairs = 20000;
  for (int i = 0; i < pairs; ++i) across += (u.latents.row(pick(rng)) - u.latents.row(pick(rng))).norm();
  CHECK(within / static_cast<double>(within_n) < across / pairs);
}

TEST_CASE("sampling range errors") {
  UniverseConfig cfg;
  const auto u = generate_universe(cfg);
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(sample_compatible_outfits(u.catalog, 10, {3, 9}, rng), ConfigError);
  CHECK_THROWS_AS(sample_compatible_outfits(u.catalog, 10, {1, 4}, rng), ConfigError);
  CHECK_THROWS_AS(sample_compatible_outfits(u.catalog, 10, {5, 4}, rng), ConfigError);
}

TEST_CASE("incompatible outfits keep categories and flip targets") {
  const auto u = generate_universe({});
  std::mt19937_64 rng(2);
  const auto compat = sample_compatible_outfits(u.catalog, 50, {3, 6}, rng);
  const auto incompat = sample_incompatible_outfits(compat, u.catalog, rng);
  REQUIRE(incompat.size() == compat.size());
  for (std::size_t i = 0; i < compat.size(); ++i) {
    CHECK(incompat[i].t_ocr == 0.0);
    for (std::size_t p = 0; p < compat[i].size(); ++p) {
      CHECK(incompat[i].t_mid[p] == 1);
      CHECK(incompat[i].garment_ids[p] != compat[i].garment_ids[p]);
      CHECK(u.catalog.at(incompat[i].garment_ids[p]).category_id == u.catalog.at(compat[i].garment_ids[p]).category_id);
      CHECK(u.catalog.at(incompat[i].garment_ids[p]).archetype != u.catalog.at(compat[i].garment_ids[p]).archetype);
    }
  }
}

TEST_CASE("disjoint corpora do not share garments across splits") {
  const auto u = generate_universe({});
  CorpusConfig cc;
  cc.disjoint = true;
  cc.train_outfits = 200;
  cc.valid_outfits = 50;
  cc.test_outfits = 50;
  const auto outfits = generate_outfits(u.catalog, cc);
  CHECK(outfits.size() == 600);
  std::map<std::string, Split> owner;
  std::set<std::string> ids;
  for (const auto& o : outfits) {
    CHECK(ids.insert(o.outfit_id).second);
    for (const auto& g : o.garment_ids) {
      auto [it, fresh] = owner.emplace(g, o.split);
      CHECK(it->second == o.split);
    }
  }
  check_corpus({u.catalog, outfits});
}

TEST_CASE("corpus persistence") {
  testing::TempDir dir("catalog");

  SUBCASE("empty file") {
    core::write_text_file(dir / "empty.json", "");
    CHECK(load_corpus(dir / "empty.json").catalog.empty());
    core::write_text_file(dir / "empty2.json", R"({"garments": [], "outfits": []})");
    const auto c = load_corpus(dir / "empty2.json");
    CHECK(c.catalog.empty());
    CHECK(c.outfits.empty());
  }

  SUBCASE("round trip of a generated universe") {
    UniverseConfig cfg;
    cfg.items_per_category_per_archetype = 4;
    const auto u = generate_universe(cfg);
    CorpusConfig cc;
    cc.train_outfits = 20;
    cc.valid_outfits = 5;
    cc.test_outfits = 5;
    Corpus corpus{u.catalog, generate_outfits(u.catalog, cc)};
    save_corpus(dir / "corpus.json", corpus);
    CHECK(load_corpus(dir / "corpus.json") == corpus);
  }

  SUBCASE("dangling garment id") {
    core::write_text_file(dir / "bad.json", R"({
      "garments": [{"id": "a", "category_id": 0, "category_name": "top", "text_tokens": [0]},
                   {"id": "b", "category_id": 1, "category_name": "bottom", "text_tokens": [1]}],
      "outfits": [{"outfit_id": "o1", "garment_ids": ["a", "zzz"], "t_ocr": 1.0, "t_mid": [0, 0], "split": "train"}]})");
    try {
      load_corpus(dir / "bad.json");
      FAIL("expected ReferentialError");
    } catch (const ReferentialError& e) {
      CHECK(e.id() == "zzz");
      CHECK(std::string(e.what()).find("zzz") != std::string::npos);
    }
  }

  SUBCASE("schema violation carries a JSON path") {
    core::write_text_file(dir / "schema.json", R"({"garments": [{"id": "a", "category_id": "zero", "category_name": "top", "text_tokens": [0]}]})");
    try {
      load_corpus(dir / "schema.json");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.path() == "/garments/0/category_id");
    }
    core::write_text_file(dir / "targets.json", R"({
      "garments": [{"id": "a", "category_id": 0, "category_name": "top", "text_tokens": [0]},
                   {"id": "b", "category_id": 1, "category_name": "bottom", "text_tokens": [1]}],
      "outfits": [{"outfit_id": "o1", "garment_ids": ["a", "b"], "t_ocr": 1.0, "t_mid": [1, 0], "split": "train"}]})");
    CHECK_THROWS_AS(load_corpus(dir / "targets.json"), ParseError);
  }

  SUBCASE("partial compatibility targets are accepted") {
    core::write_text_file(dir / "partial.json", R"({
      "garments": [{"id": "a", "category_id": 0, "category_name": "top", "text_tokens": [0]},
                   {"id": "b", "category_id": 1, "category_name": "bottom", "text_tokens": [1]},
                   {"id": "c", "category_id": 2, "category_name": "shoes", "text_tokens": [2]}],
      "outfits": [{"outfit_id": "o1", "garment_ids": ["a", "b", "c"], "t_ocr": 0.4, "t_mid": [0, 1, 1], "split": "test"}]})");
    CHECK(load_corpus(dir / "partial.json").outfits.at(0).t_ocr == 0.4);
  }
}

}  // TEST_SUITE
