#include "misfitlab/misfit.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "misfitlab/core/io.hpp"
#include "misfitlab/errors.hpp"

namespace misfitlab {

std::optional<std::pair<std::size_t, std::size_t>> replacement_range(std::size_t n) {
  if (n <= 2) return std::nullopt;
  if (n == 3) return std::pair<std::size_t, std::size_t>{1, 1};
  return std::pair<std::size_t, std::size_t>{1, n - 2};
}

double misfit_score(std::size_t n, std::size_t r) {
  return static_cast<double>(n - r) / static_cast<double>(n);
}

namespace {

std::uint64_t outfit_seed(std::uint64_t seed, const std::string& outfit_id) {
  core::Fnv1a h;
  h.update_value(seed);
  h.update(outfit_id);
  return h.digest();
}

}  // namespace

MisfitBatch generate_misfits(std::span<const OutfitSample> compatible, const Catalog& catalog, const MisfitConfig& config) {
  if (config.m < 1) throw ConfigError("misfits: m must be at least 1");
  MisfitBatch out;
  const auto garments = catalog.garments();
  std::vector<std::size_t> order, candidates;
  for (const auto& src : compatible) {
    if (src.t_ocr != 1.0) throw ContractError("generate_misfits: outfit " + src.outfit_id + " is not fully compatible");
    const auto n = src.size();
    const auto range = replacement_range(n);
    if (!range) continue;
    std::mt19937_64 rng(outfit_seed(config.seed, src.outfit_id));
    std::uniform_int_distribution<std::size_t> pick_r(range->first, range->second);
    for (int k = 0; k < config.m; ++k) {
      const std::size_t r = pick_r(rng);
      order.resize(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      for (std::size_t i = 0; i < r; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(order[i], order[pick(rng)]);
      }
      std::vector<std::size_t> drawn(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(r));
      std::sort(drawn.begin(), drawn.end());

      OutfitSample s = src;
      s.outfit_id = src.outfit_id + "-m" + std::to_string(k);
      ReplacementRecord rec;
      rec.source_outfit_id = src.outfit_id;
      rec.misfit_id = s.outfit_id;
      rec.n = n;
      for (auto p : drawn) {
        const auto& original = catalog.at(src.garment_ids[p]);
        const std::optional<Split> pool = config.disjoint ? original.split : std::nullopt;
        candidates.clear();
        for (auto idx : catalog.in_category(original.category_id))
          if (garments[idx].id != original.id && (!pool || garments[idx].split == pool) && clashes_with(garments[idx], original))
            candidates.push_back(idx);
        if (candidates.empty()) {
          rec.skipped.push_back(p);
          out.warnings.push_back(s.outfit_id + ": no alternative for position " + std::to_string(p) + " (" + original.id + ")");
          continue;
        }
        std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
        const auto& repl = garments[candidates[pick(rng)]];
        s.garment_ids[p] = repl.id;
        rec.positions.push_back(p);
        rec.replaced_with.push_back(repl.id);
      }
      if (rec.positions.empty()) {
        out.warnings.push_back(s.outfit_id + ": dropped, every drawn position was skipped");
        continue;
      }
      s.t_mid.assign(n, 0);
      for (auto p : rec.positions) s.t_mid[p] = 1;
      s.t_ocr = misfit_score(n, rec.r());
      out.misfits.push_back(std::move(s));
      out.records.push_back(std::move(rec));
    }
  }
  return out;
}

Composition expected_composition(std::size_t compatible, std::size_t eligible, int m) {
  const double c = static_cast<double>(compatible);
  const double mis = static_cast<double>(eligible) * m;
  const double total = 2.0 * c + mis;
  if (total == 0) return {};
  return {c / total, mis / total, c / total};
}

Composition DistributionReport::shares() const {
  const double t = static_cast<double>(total());
  if (t == 0) return {};
  return {static_cast<double>(compatible) / t, static_cast<double>(misfits) / t, static_cast<double>(incompatible) / t};
}

nlohmann::json DistributionReport::to_json() const {
  nlohmann::json j;
  j["m"] = m;
  j["counts"] = {{"compatible", compatible}, {"misfits", misfits}, {"incompatible", incompatible}, {"total", total()},
                 {"ineligible_n_le_2", ineligible}};
  const auto s = shares();
  j["shares_percent"] = {{"compatible", 100 * s.compatible}, {"misfits", 100 * s.misfits}, {"incompatible", 100 * s.incompatible}};
  nlohmann::json splits = nlohmann::json::object();
  for (auto [k, v] : per_split) splits[std::string(to_string(k))] = v;
  j["per_split"] = splits;
  nlohmann::json hist = nlohmann::json::array();
  for (auto [k, v] : t_ocr_histogram) hist.push_back({{"t_ocr", k}, {"count", v}});
  j["t_ocr_histogram"] = hist;
  j["note"] = note;
  return j;
}

MisfitDataset build_misfit_dataset(std::span<const OutfitSample> outfits, const Catalog& catalog, const MisfitConfig& config) {
  std::vector<OutfitSample> compat, incompat;
  for (const auto& o : outfits) {
    if (o.fully_compatible()) compat.push_back(o);
    else if (o.fully_incompatible()) incompat.push_back(o);
    else throw ContractError("build_misfit_dataset: outfit " + o.outfit_id + " is neither fully compatible nor fully incompatible");
  }
  if (config.include_fully_incompatible && compat.size() != incompat.size())
    throw ContractError("build_misfit_dataset: expected matched counts, got " + std::to_string(compat.size()) +
                        " compatible vs " + std::to_string(incompat.size()) + " incompatible");

  auto batch = generate_misfits(compat, catalog, config);
  MisfitDataset ds;
  ds.samples = compat;
  ds.samples.insert(ds.samples.end(), batch.misfits.begin(), batch.misfits.end());
  if (config.include_fully_incompatible) ds.samples.insert(ds.samples.end(), incompat.begin(), incompat.end());
  ds.records = std::move(batch.records);
  ds.warnings = std::move(batch.warnings);

  auto& rep = ds.report;
  rep.m = config.m;
  rep.compatible = compat.size();
  rep.misfits = batch.misfits.size();
  rep.incompatible = config.include_fully_incompatible ? incompat.size() : 0;
  for (const auto& o : compat)
    if (!replacement_range(o.size())) ++rep.ineligible;
  for (const auto& s : ds.samples) {
    ++rep.per_split[s.split];
    ++rep.t_ocr_histogram[s.t_ocr];
  }

  const auto all_eligible = expected_composition(rep.compatible, rep.compatible, config.m);
  const auto corrected = expected_composition(rep.compatible, rep.compatible - rep.ineligible, config.m);
  std::ostringstream note;
  note.precision(4);
  note << "With every outfit eligible, m=" << config.m << " gives " << 100 * all_eligible.compatible << "% compatible / "
       << 100 * all_eligible.misfits << "% MISFITs / " << 100 * all_eligible.incompatible << "% incompatible. "
       << rep.ineligible << " of " << rep.compatible
       << " compatible outfits have n <= 2 and yield no MISFITs, which shifts the expected shares to "
       << 100 * corrected.compatible << "% / " << 100 * corrected.misfits << "% / " << 100 * corrected.incompatible << "%.";
  rep.note = note.str();
  return ds;
}

nlohmann::json to_json(const ReplacementRecord& r) {
  return {{"source_outfit_id", r.source_outfit_id}, {"misfit_id", r.misfit_id}, {"n", r.n},   {"r", r.r()},
          {"positions", r.positions},               {"replaced_with", r.replaced_with},      {"skipped", r.skipped}};
}

ReplacementRecord record_from_json(const nlohmann::json& j) {
  ReplacementRecord r;
  try {
    r.source_outfit_id = j.at("source_outfit_id").get<std::string>();
    r.misfit_id = j.at("misfit_id").get<std::string>();
    r.n = j.at("n").get<std::size_t>();
    r.positions = j.at("positions").get<std::vector<std::size_t>>();
    r.replaced_with = j.at("replaced_with").get<std::vector<std::string>>();
    r.skipped = j.value("skipped", std::vector<std::size_t>{});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("replacements", e.what());
  }
  if (r.positions.size() != r.replaced_with.size()) throw ParseError("replacements", "positions and replaced_with differ in length");
  return r;
}

void write_replacements(const std::filesystem::path& path, std::span<const ReplacementRecord> records) {
  std::string text;
  for (const auto& r : records) text += to_json(r).dump() + "\n";
  core::write_text_file(path, text);
}

std::vector<ReplacementRecord> read_replacements(const std::filesystem::path& path) {
  std::istringstream in(core::read_text_file(path));
  std::vector<ReplacementRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(out.size() + 1), e.what());
    }
  }
  return out;
}

}  // namespace misfitlab
