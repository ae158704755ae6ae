#include "nas/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <toml.hpp>

#include "nas/external.hpp"
#include "nas/metrics.hpp"

namespace nas {

namespace fs = std::filesystem;

std::string format_double(double value) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc()) throw std::runtime_error("cannot format double");
  return std::string(buf, end);
}

std::unique_ptr<UnitEvaluator> make_evaluator(const EvaluatorSpec& spec) {
  switch (spec.kind) {
    case EvaluatorSpec::Kind::Synthetic: return std::make_unique<SyntheticBenchmark>(spec.synthetic);
    case EvaluatorSpec::Kind::Tabular:
      return std::make_unique<TabularBenchmark>(TabularBenchmark::load(spec.tabular_path));
    case EvaluatorSpec::Kind::External: {
      const std::string command = spec.command;
      auto factory = [command] { return std::make_unique<SubprocessTransport>(command); };
      return std::make_unique<ExternalEvaluatorPool>(factory, spec.workers, spec.timeout);
    }
  }
  throw ConfigError("unknown evaluator kind");
}

// --- Config -------------------------------------------------------------------

namespace {

std::string_view kind_name(EvaluatorSpec::Kind kind) {
  switch (kind) {
    case EvaluatorSpec::Kind::Synthetic: return "synthetic";
    case EvaluatorSpec::Kind::Tabular: return "tabular";
    case EvaluatorSpec::Kind::External: return "external";
  }
  return "?";
}

void reject_unknown(const toml::table& table, std::initializer_list<std::string_view> known, std::string_view where) {
  for (auto&& [key, node] : table) {
    if (std::find(known.begin(), known.end(), key.str()) == known.end())
      throw ConfigError("unknown key '" + std::string(key.str()) + "' in " + std::string(where));
  }
}

template <typename T>
T get_or(const toml::table& table, std::string_view key, T fallback) {
  const toml::node* node = table.get(key);
  if (!node) return fallback;
  if constexpr (std::is_same_v<T, bool>) {
    if (auto v = node->value_exact<bool>()) return *v;
  } else if constexpr (std::is_floating_point_v<T>) {
    if (auto v = node->value<double>()) return *v;
  } else if constexpr (std::is_integral_v<T>) {
    if (auto v = node->value_exact<std::int64_t>()) {
      if (*v < 0 && std::is_unsigned_v<T>) throw ConfigError("'" + std::string(key) + "' must be non-negative");
      return static_cast<T>(*v);
    }
  } else {
    if (auto v = node->value_exact<std::string>()) return *v;
  }
  throw ConfigError("'" + std::string(key) + "' has the wrong type");
}

std::vector<std::int64_t> int_list(const toml::node& node, std::string_view key) {
  const toml::array* array = node.as_array();
  if (!array) throw ConfigError("'" + std::string(key) + "' must be an array of integers");
  std::vector<std::int64_t> out;
  for (const auto& item : *array) {
    auto v = item.value_exact<std::int64_t>();
    if (!v) throw ConfigError("'" + std::string(key) + "' must be an array of integers");
    out.push_back(*v);
  }
  return out;
}

std::vector<std::string> string_list(const toml::table& table, std::string_view one, std::string_view many) {
  if (table.contains(one) && table.contains(many))
    throw ConfigError("give either '" + std::string(one) + "' or '" + std::string(many) + "'");
  if (const toml::node* n = table.get(one)) {
    auto v = n->value_exact<std::string>();
    if (!v) throw ConfigError("'" + std::string(one) + "' must be a string");
    return {*v};
  }
  std::vector<std::string> out;
  if (const toml::node* n = table.get(many)) {
    const toml::array* array = n->as_array();
    if (!array) throw ConfigError("'" + std::string(many) + "' must be an array of strings");
    for (const auto& item : *array) {
      auto v = item.value_exact<std::string>();
      if (!v) throw ConfigError("'" + std::string(many) + "' must be an array of strings");
      out.push_back(*v);
    }
  }
  return out;
}

// A list of ids, or a half-open range [first, last).
std::vector<int> id_list(const toml::table& table, std::string_view key, std::string_view range_key,
                         std::vector<int> fallback) {
  if (table.contains(key) && table.contains(range_key))
    throw ConfigError("give either '" + std::string(key) + "' or '" + std::string(range_key) + "'");
  std::vector<int> out;
  if (const toml::node* n = table.get(key)) {
    for (auto v : int_list(*n, key)) out.push_back(static_cast<int>(v));
    return out;
  }
  if (const toml::node* n = table.get(range_key)) {
    const auto r = int_list(*n, range_key);
    if (r.size() != 2 || r[1] < r[0]) throw ConfigError("'" + std::string(range_key) + "' must be [first, last)");
    for (auto v = r[0]; v < r[1]; ++v) out.push_back(static_cast<int>(v));
    return out;
  }
  return fallback;
}

SeedPool parse_pool(const toml::table* table, SeedPool fallback, std::string_view where) {
  if (!table) return fallback;
  reject_unknown(*table, {"partitionings", "partitioning_range", "seeds", "seed_range"}, where);
  SeedPool pool;
  pool.partitionings = id_list(*table, "partitionings", "partitioning_range", fallback.partitionings);
  pool.seeds = id_list(*table, "seeds", "seed_range", fallback.seeds);
  return pool;
}

const toml::table* subtable(const toml::table& root, std::string_view key) {
  const toml::node* node = root.get(key);
  if (!node) return nullptr;
  if (!node->is_table()) throw ConfigError("'" + std::string(key) + "' must be a table");
  return node->as_table();
}

// Contiguous ascending ids are stored as a range.
void insert_ids(toml::table& table, std::string_view key, std::string_view range_key, const std::vector<int>& ids) {
  bool contiguous = !ids.empty();
  for (std::size_t i = 1; i < ids.size() && contiguous; ++i) contiguous = ids[i] == ids[i - 1] + 1;
  toml::array a;
  if (contiguous) {
    a.push_back(static_cast<std::int64_t>(ids.front()));
    a.push_back(static_cast<std::int64_t>(ids.back()) + 1);
    table.insert(range_key, a);
    return;
  }
  for (int v : ids) a.push_back(static_cast<std::int64_t>(v));
  table.insert(key, a);
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(std::string_view toml_text, const fs::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config line " << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }
  reject_unknown(root,
                 {"output_dir", "algorithm", "algorithms", "setup", "setups", "budget", "budgets", "n_runs", "n_best",
                  "seeds", "plan_seed_offset", "holdout_seed", "max_call_factor", "jobs", "evaluator", "search_pool",
                  "holdout_pool", "noise"},
                 "config");

  ExperimentConfig c;
  c.output_dir = base_dir / get_or<std::string>(root, "output_dir", "results");

  try {
    auto algorithms = string_list(root, "algorithm", "algorithms");
    if (!algorithms.empty()) {
      c.algorithms.clear();
      for (const auto& a : algorithms) c.algorithms.push_back(algorithm_from_string(a));
    }
    auto setups = string_list(root, "setup", "setups");
    if (!setups.empty()) {
      c.setups.clear();
      for (const auto& s : setups) c.setups.push_back(setup_from_string(s));
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (root.contains("budget") && root.contains("budgets")) throw ConfigError("give either 'budget' or 'budgets'");
  if (const toml::node* n = root.get("budget")) {
    auto v = n->value_exact<std::int64_t>();
    if (!v) throw ConfigError("'budget' must be an integer");
    c.budgets = {*v};
  } else if (const toml::node* n = root.get("budgets")) {
    auto v = int_list(*n, "budgets");
    c.budgets.assign(v.begin(), v.end());
  }

  c.n_runs = get_or<std::size_t>(root, "n_runs", c.n_runs);
  c.n_best = get_or<std::size_t>(root, "n_best", c.n_best);
  if (const toml::node* n = root.get("seeds")) {
    for (auto v : int_list(*n, "seeds")) {
      if (v < 0) throw ConfigError("seeds must be non-negative");
      c.seeds.push_back(static_cast<std::uint64_t>(v));
    }
  } else {
    for (std::size_t r = 0; r < c.n_runs; ++r) c.seeds.push_back(r);
  }
  c.plan_seed_offset = get_or<std::uint64_t>(root, "plan_seed_offset", c.plan_seed_offset);
  c.holdout_seed = get_or<std::uint64_t>(root, "holdout_seed", c.holdout_seed);
  c.max_call_factor = get_or<double>(root, "max_call_factor", c.max_call_factor);
  c.jobs = get_or<std::size_t>(root, "jobs", c.jobs);

  if (const toml::table* ev = subtable(root, "evaluator")) {
    reject_unknown(*ev,
                   {"kind", "benchmark_seed", "k", "m", "sigma_seed", "sigma_fold", "sigma_interaction", "shaped",
                    "center", "scale", "curvature", "path", "command", "workers", "timeout_s"},
                   "[evaluator]");
    const auto kind = get_or<std::string>(*ev, "kind", "synthetic");
    if (kind == "synthetic") c.evaluator.kind = EvaluatorSpec::Kind::Synthetic;
    else if (kind == "tabular") c.evaluator.kind = EvaluatorSpec::Kind::Tabular;
    else if (kind == "external") c.evaluator.kind = EvaluatorSpec::Kind::External;
    else throw ConfigError("unknown evaluator kind '" + kind + "'");

    auto& p = c.evaluator.synthetic;
    p.benchmark_seed = get_or<std::uint64_t>(*ev, "benchmark_seed", p.benchmark_seed);
    p.k = get_or<int>(*ev, "k", p.k);
    p.m = get_or<int>(*ev, "m", p.m);
    p.sigma_seed = get_or<double>(*ev, "sigma_seed", p.sigma_seed);
    p.sigma_fold = get_or<double>(*ev, "sigma_fold", p.sigma_fold);
    p.sigma_interaction = get_or<double>(*ev, "sigma_interaction", p.sigma_interaction);
    p.shaped = get_or<bool>(*ev, "shaped", p.shaped);
    p.center = get_or<double>(*ev, "center", p.center);
    p.scale = get_or<double>(*ev, "scale", p.scale);
    p.curvature = get_or<double>(*ev, "curvature", p.curvature);
    if (ev->contains("path")) c.evaluator.tabular_path = base_dir / get_or<std::string>(*ev, "path", "");
    c.evaluator.command = get_or<std::string>(*ev, "command", "");
    c.evaluator.workers = get_or<std::size_t>(*ev, "workers", c.evaluator.workers);
    const double timeout_s = get_or<double>(*ev, "timeout_s", 3600.0);
    if (!(timeout_s > 0)) throw ConfigError("timeout_s must be positive");
    c.evaluator.timeout = std::chrono::milliseconds(static_cast<long long>(std::ceil(timeout_s * 1000.0)));
  }
  c.search_pool = parse_pool(subtable(root, "search_pool"), SeedPool::search_default(), "[search_pool]");
  c.holdout_pool = parse_pool(subtable(root, "holdout_pool"), SeedPool::holdout_default(), "[holdout_pool]");
  if (const toml::table* nz = subtable(root, "noise")) {
    reject_unknown(*nz, {"n_samples", "fraction", "sample_seed"}, "[noise]");
    c.noise.n_samples = get_or<std::size_t>(*nz, "n_samples", c.noise.n_samples);
    c.noise.fraction = get_or<double>(*nz, "fraction", c.noise.fraction);
    c.noise.sample_seed = get_or<std::uint64_t>(*nz, "sample_seed", c.noise.sample_seed);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse(text.str(), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

void ExperimentConfig::validate() const {
  if (algorithms.empty() || setups.empty() || budgets.empty()) throw ConfigError("empty experiment grid");
  for (auto b : budgets)
    if (b < 1) throw ConfigError("budgets must be positive");
  if (n_runs < 1) throw ConfigError("n_runs must be at least 1");
  if (n_best < 1) throw ConfigError("n_best must be at least 1");
  if (seeds.size() != n_runs) throw ConfigError("need exactly n_runs seeds");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("run seeds must be distinct");
  if (!(max_call_factor >= 1.0)) throw ConfigError("max_call_factor must be at least 1");
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
  if (pools_overlap(search_pool, holdout_pool)) throw ConfigError("holdout pool overlaps the search pool");
  if (!(noise.fraction > 0.0 && noise.fraction <= 1.0)) throw ConfigError("noise fraction must be in (0, 1]");
  if (noise.n_samples < 2) throw ConfigError("noise analysis needs at least two samples");
  switch (evaluator.kind) {
    case EvaluatorSpec::Kind::Synthetic: {
      const SyntheticBenchmark probe(evaluator.synthetic);
      break;
    }
    case EvaluatorSpec::Kind::Tabular:
      if (evaluator.tabular_path.empty()) throw ConfigError("tabular evaluator needs 'path'");
      break;
    case EvaluatorSpec::Kind::External:
      if (evaluator.command.empty()) throw ConfigError("external evaluator needs 'command'");
      if (evaluator.workers < 1) throw ConfigError("workers must be at least 1");
      break;
  }
  // Plans must be drawable; this throws ConfigError for undersized pools.
  make_split_plan(Setup::ThreeCV, search_pool, 0);
  make_holdout_plan(holdout_pool, search_pool, holdout_seed);
}

namespace {

// Canonical form stored next to the results, with absolute paths.
std::string config_to_toml(const ExperimentConfig& c) {
  toml::table root;
  toml::array algorithms, setups, budgets, seeds;
  for (auto a : c.algorithms) algorithms.push_back(std::string(to_string(a)));
  for (auto s : c.setups) setups.push_back(std::string(to_string(s)));
  for (auto b : c.budgets) budgets.push_back(static_cast<std::int64_t>(b));
  for (auto s : c.seeds) seeds.push_back(static_cast<std::int64_t>(s));
  root.insert("algorithms", algorithms);
  root.insert("setups", setups);
  root.insert("budgets", budgets);
  root.insert("n_runs", static_cast<std::int64_t>(c.n_runs));
  root.insert("n_best", static_cast<std::int64_t>(c.n_best));
  root.insert("seeds", seeds);
  root.insert("plan_seed_offset", static_cast<std::int64_t>(c.plan_seed_offset));
  root.insert("holdout_seed", static_cast<std::int64_t>(c.holdout_seed));
  root.insert("max_call_factor", c.max_call_factor);
  root.insert("jobs", static_cast<std::int64_t>(c.jobs));

  toml::table ev;
  ev.insert("kind", std::string(kind_name(c.evaluator.kind)));
  const auto& p = c.evaluator.synthetic;
  switch (c.evaluator.kind) {
    case EvaluatorSpec::Kind::Synthetic:
      ev.insert("benchmark_seed", static_cast<std::int64_t>(p.benchmark_seed));
      ev.insert("k", p.k);
      ev.insert("m", p.m);
      ev.insert("sigma_seed", p.sigma_seed);
      ev.insert("sigma_fold", p.sigma_fold);
      ev.insert("sigma_interaction", p.sigma_interaction);
      ev.insert("shaped", p.shaped);
      ev.insert("center", p.center);
      ev.insert("scale", p.scale);
      ev.insert("curvature", p.curvature);
      break;
    case EvaluatorSpec::Kind::Tabular: ev.insert("path", fs::absolute(c.evaluator.tabular_path).string()); break;
    case EvaluatorSpec::Kind::External:
      ev.insert("command", c.evaluator.command);
      ev.insert("workers", static_cast<std::int64_t>(c.evaluator.workers));
      ev.insert("timeout_s", static_cast<double>(c.evaluator.timeout.count()) / 1000.0);
      break;
  }
  root.insert("evaluator", ev);
  toml::table search, holdout, noise;
  insert_ids(search, "partitionings", "partitioning_range", c.search_pool.partitionings);
  insert_ids(search, "seeds", "seed_range", c.search_pool.seeds);
  insert_ids(holdout, "partitionings", "partitioning_range", c.holdout_pool.partitionings);
  insert_ids(holdout, "seeds", "seed_range", c.holdout_pool.seeds);
  noise.insert("n_samples", static_cast<std::int64_t>(c.noise.n_samples));
  noise.insert("fraction", c.noise.fraction);
  noise.insert("sample_seed", static_cast<std::int64_t>(c.noise.sample_seed));
  root.insert("search_pool", search);
  root.insert("holdout_pool", holdout);
  root.insert("noise", noise);
  std::ostringstream out;
  out << root << '\n';
  return out.str();
}

}  // namespace

ExperimentConfig ExperimentConfig::load_from_results(const fs::path& results_dir) {
  const fs::path path = results_dir / "config.toml";
  if (!fs::exists(path)) throw ConfigError("no config.toml in " + results_dir.string());
  ExperimentConfig c = ExperimentConfig::load(path);
  c.output_dir = results_dir;
  return c;
}

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

// --- Runs ---------------------------------------------------------------------

std::string cell_name(Algorithm algorithm, Setup setup, long long budget) {
  return std::string(to_string(algorithm)) + "_" + std::string(to_string(setup)) + "_" + std::to_string(budget);
}

std::string to_json(const RunResult& r) {
  nlohmann::ordered_json j;
  j["algorithm"] = to_string(r.algorithm);
  j["setup"] = to_string(r.setup);
  j["budget"] = r.budget;
  j["search_seed"] = r.search_seed;
  j["plan_seed"] = r.plan_seed;
  j["status"] = r.ok ? "ok" : "failed";
  j["error"] = r.error;
  j["trainings"] = r.trainings;
  j["evaluations"] = r.evaluations;
  j["paid_evaluations"] = r.paid_evaluations;
  j["archive"] = r.archive;
  j["best"] = nlohmann::ordered_json::array();
  for (const auto& b : r.best) {
    nlohmann::ordered_json e;
    e["genotype"] = b.genotype.to_ints();
    e["repaired"] = b.repaired.to_ints();
    e["search_fitness"] = b.search_fitness;
    e["independent_quality"] =
        b.independent_quality ? nlohmann::ordered_json(*b.independent_quality) : nlohmann::ordered_json(nullptr);
    j["best"].push_back(e);
  }
  return j.dump() + "\n";
}

RunResult run_result_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RunResult r;
    r.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
    r.setup = setup_from_string(j.at("setup").get<std::string>());
    r.budget = j.at("budget").get<long long>();
    r.search_seed = j.at("search_seed").get<std::uint64_t>();
    r.plan_seed = j.at("plan_seed").get<std::uint64_t>();
    r.ok = j.at("status").get<std::string>() == "ok";
    r.error = j.at("error").get<std::string>();
    r.trainings = j.at("trainings").get<long long>();
    r.evaluations = j.at("evaluations").get<std::size_t>();
    r.paid_evaluations = j.at("paid_evaluations").get<std::size_t>();
    r.archive = j.at("archive").get<std::string>();
    for (const auto& e : j.at("best")) {
      BestEntry b;
      b.genotype = Genotype::from_ints(e.at("genotype").get<std::vector<int>>());
      b.repaired = Genotype::from_ints(e.at("repaired").get<std::vector<int>>());
      b.search_fitness = e.at("search_fitness").get<double>();
      if (!e.at("independent_quality").is_null()) b.independent_quality = e.at("independent_quality").get<double>();
      r.best.push_back(b);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed run result: ") + e.what());
  }
}

std::vector<BestEntry> select_best(const std::vector<Solution>& history, std::size_t n) {
  std::vector<BestEntry> unique;
  std::set<Genotype> seen;
  for (const auto& s : history) {
    Genotype repaired = repair(s.genotype);
    if (seen.insert(repaired).second) unique.push_back({s.genotype, repaired, s.fitness, std::nullopt});
  }
  std::stable_sort(unique.begin(), unique.end(),
                   [](const BestEntry& a, const BestEntry& b) { return a.search_fitness > b.search_fitness; });
  if (unique.size() > n) unique.resize(n);
  return unique;
}

RunResult execute_run(const ExperimentConfig& config, Algorithm algorithm, Setup setup, long long budget,
                      std::uint64_t search_seed, UnitEvaluator& evaluator, EvaluationArchive& archive) {
  RunResult r;
  r.algorithm = algorithm;
  r.setup = setup;
  r.budget = budget;
  r.search_seed = search_seed;
  r.plan_seed = config.plan_seed_offset + search_seed;

  const SplitPlan plan = make_split_plan(setup, config.search_pool, r.plan_seed);
  BudgetLedger ledger(budget);
  const auto allowed = static_cast<double>(evaluations_allowed(budget, setup));
  const auto max_calls = static_cast<std::size_t>(std::floor(config.max_call_factor * allowed));
  BudgetedObjective objective(setup, plan, evaluator, archive, ledger, max_calls);
  try {
    const SearchState state = run_search(algorithm, objective, search_seed);
    r.best = select_best(state.history, config.n_best);
  } catch (const EvaluatorError& e) {
    r.ok = false;
    r.error = e.what();
  } catch (const MissingEntry& e) {
    r.ok = false;
    r.error = e.what();
  }
  r.trainings = ledger.consumed();
  r.evaluations = objective.calls();
  r.paid_evaluations = objective.paid_evaluations();
  return r;
}

std::vector<RunResult> run_experiment(const ExperimentConfig& config) {
  config.validate();
  struct Task {
    Algorithm algorithm;
    Setup setup;
    long long budget;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (auto a : config.algorithms)
    for (auto s : config.setups)
      for (auto b : config.budgets)
        for (auto seed : config.seeds) tasks.push_back({a, s, b, seed});

  const fs::path root = config.output_dir;
  fs::create_directories(root);
  write_file(root / "config.toml", config_to_toml(config));
  for (auto a : config.algorithms)
    for (auto s : config.setups)
      for (auto b : config.budgets) fs::create_directories(root / cell_name(a, s, b));

  std::vector<RunResult> results(tasks.size());
  std::size_t next = 0;
  std::mutex mutex;
  std::exception_ptr fatal;
  auto worker = [&] {
    std::unique_ptr<UnitEvaluator> evaluator;
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mutex);
        if (next >= tasks.size() || fatal) return;
        i = next++;
      }
      try {
        const Task& t = tasks[i];
        EvaluationArchive archive;
        RunResult r;
        try {
          if (!evaluator) evaluator = make_evaluator(config.evaluator);
        } catch (const EvaluatorError& e) {
          // workers that cannot start fail this run; the next one tries again
          r.algorithm = t.algorithm;
          r.setup = t.setup;
          r.budget = t.budget;
          r.search_seed = t.seed;
          r.plan_seed = config.plan_seed_offset + t.seed;
          r.ok = false;
          r.error = e.what();
        }
        if (evaluator) r = execute_run(config, t.algorithm, t.setup, t.budget, t.seed, *evaluator, archive);
        const std::string stem = cell_name(t.algorithm, t.setup, t.budget) + "/seed_" + std::to_string(t.seed);
        r.archive = stem + ".jsonl";
        write_file(root / r.archive, archive.log_text());
        write_file(root / (stem + ".json"), to_json(r));
        results[i] = std::move(r);
        // A broken worker connection is not reused by the next run.
        if (!results[i].ok && config.evaluator.kind == EvaluatorSpec::Kind::External) evaluator.reset();
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!fatal) fatal = std::current_exception();
        return;
      }
    }
  };
  const std::size_t threads = std::min(config.jobs, tasks.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  write_reports(root, results, config);
  return results;
}

std::vector<RunResult> load_results(const fs::path& results_dir) {
  if (!fs::is_directory(results_dir)) throw ConfigError("no results directory " + results_dir.string());
  std::vector<RunResult> results;
  for (const auto& entry : fs::recursive_directory_iterator(results_dir)) {
    const auto& path = entry.path();
    if (!entry.is_regular_file() || path.extension() != ".json" || !path.stem().string().starts_with("seed_")) continue;
    std::ifstream in(path);
    std::stringstream text;
    text << in.rdbuf();
    results.push_back(run_result_from_json(text.str()));
  }
  std::sort(results.begin(), results.end(), [](const RunResult& a, const RunResult& b) {
    return std::tie(a.algorithm, a.setup, a.budget, a.search_seed) <
           std::tie(b.algorithm, b.setup, b.budget, b.search_seed);
  });
  return results;
}

std::vector<RunResult> reevaluate(const fs::path& results_dir, const ExperimentConfig& config,
                                  UnitEvaluator& evaluator) {
  if (pools_overlap(config.holdout_pool, config.search_pool))
    throw ConfigError("holdout pool overlaps the search pool; refusing to re-evaluate");
  const SplitPlan plan = make_holdout_plan(config.holdout_pool, config.search_pool, config.holdout_seed);

  EvaluationArchive cache;
  const fs::path cache_path = results_dir / "holdout.jsonl";
  if (fs::exists(cache_path)) {
    std::ifstream in(cache_path);
    EvaluationArchive::replay(in, cache);
  }
  std::vector<RunResult> results = load_results(results_dir);
  std::exception_ptr failure;
  for (auto& r : results) {
    if (!r.ok) continue;
    try {
      for (auto& b : r.best) b.independent_quality = independent_quality(b.genotype, evaluator, plan, &cache);
    } catch (const EvaluatorError&) {
      failure = std::current_exception();
      break;
    } catch (const MissingEntry&) {
      failure = std::current_exception();
      break;
    }
  }
  // Whatever was trained is kept, so a retry resumes from the cache.
  write_file(cache_path, cache.log_text());
  if (failure) std::rethrow_exception(failure);
  for (const auto& r : results)
    write_file(results_dir / (cell_name(r.algorithm, r.setup, r.budget) + "/seed_" + std::to_string(r.search_seed) +
                              ".json"),
               to_json(r));
  return results;
}

// --- Reports ------------------------------------------------------------------

namespace {

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace

std::vector<SummaryRow> summarize(const std::vector<RunResult>& results, const ExperimentConfig& config) {
  std::vector<SummaryRow> rows;
  for (auto a : config.algorithms)
    for (auto s : config.setups)
      for (auto b : config.budgets) {
        SummaryRow row;
        row.algorithm = a;
        row.setup = s;
        row.budget = b;
        std::vector<double> fitness, quality;
        bool quality_missing = false;
        for (const auto& r : results) {
          if (r.algorithm != a || r.setup != s || r.budget != b) continue;
          if (!r.ok) {
            ++row.failed_runs;
            continue;
          }
          ++row.runs;
          for (const auto& e : r.best) {
            ++row.architectures;
            fitness.push_back(e.search_fitness);
            if (e.independent_quality) quality.push_back(*e.independent_quality);
            else quality_missing = true;
          }
        }
        if (row.failed_runs > 0) {
          row.flag = "failed_runs";
        } else if (row.runs < config.n_runs) {
          row.flag = "missing_runs";
        } else if (row.architectures > 0) {
          row.mean_search_fitness = mean_of(fitness);
          if (quality_missing) {
            row.flag = "no_reevaluation";
          } else {
            const double m = mean_of(quality);
            row.mean_independent_quality = m;
            double ss = 0.0;
            for (double q : quality) ss += (q - m) * (q - m);
            row.sd_independent_quality =
                quality.size() > 1 ? std::sqrt(ss / static_cast<double>(quality.size() - 1)) : 0.0;
          }
        }
        rows.push_back(row);
      }
  return rows;
}

void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << "algorithm,setup,budget,runs,failed_runs,architectures,mean_search_fitness,mean_independent_quality,flag\n";
  for (const auto& r : rows) {
    out << to_string(r.algorithm) << ',' << to_string(r.setup) << ',' << r.budget << ',' << r.runs << ','
        << r.failed_runs << ',' << r.architectures << ',' << opt(r.mean_search_fitness) << ','
        << opt(r.mean_independent_quality) << ',' << r.flag << '\n';
  }
}

void write_trajectory_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
  std::vector<const SummaryRow*> sorted;
  for (const auto& r : rows) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(), [](const SummaryRow* a, const SummaryRow* b) {
    return std::tie(a->algorithm, a->setup, a->budget) < std::tie(b->algorithm, b->setup, b->budget);
  });
  out << "algorithm,setup,budget,mean_independent_quality,sd_independent_quality,mean_search_fitness\n";
  for (const auto* r : sorted) {
    out << to_string(r->algorithm) << ',' << to_string(r->setup) << ',' << r->budget << ','
        << opt(r->mean_independent_quality) << ',' << opt(r->sd_independent_quality) << ','
        << opt(r->mean_search_fitness) << '\n';
  }
}

void write_reports(const fs::path& results_dir, const std::vector<RunResult>& results,
                   const ExperimentConfig& config) {
  const auto rows = summarize(results, config);
  std::ostringstream summary, trajectory;
  write_summary_csv(summary, rows);
  write_trajectory_csv(trajectory, rows);
  write_file(results_dir / "summary.csv", summary.str());
  write_file(results_dir / "trajectory.csv", trajectory.str());
}

// --- Setup comparison ---------------------------------------------------------

std::vector<SetupPair> all_setup_pairs(const std::vector<RunResult>& results) {
  std::set<Setup> present;
  for (const auto& r : results) present.insert(r.setup);
  std::vector<SetupPair> pairs;
  for (auto a : present)
    for (auto b : present)
      if (a != b) pairs.push_back({a, b});
  return pairs;
}

std::vector<ComparisonRow> compare_setups(const std::vector<RunResult>& results, const std::vector<SetupPair>& pairs,
                                          int m, double alpha) {
  if (m < 1) throw std::invalid_argument("m must be at least 1");
  using Point = std::pair<std::uint64_t, std::size_t>;  // (run seed, rank)
  std::map<std::tuple<Algorithm, long long, Setup>, std::map<Point, double>> cells;
  for (const auto& r : results) {
    auto& cell = cells[{r.algorithm, r.budget, r.setup}];
    if (!r.ok) continue;
    for (std::size_t rank = 0; rank < r.best.size(); ++rank) {
      const auto& q = r.best[rank].independent_quality;
      if (!q)
        throw std::invalid_argument("missing independent quality in " + cell_name(r.algorithm, r.setup, r.budget) +
                                    " seed " + std::to_string(r.search_seed) + "; run reeval first");
      cell[{r.search_seed, rank}] = *q;
    }
  }
  std::set<std::pair<Algorithm, long long>> groups;
  for (const auto& [key, _] : cells) groups.insert({std::get<0>(key), std::get<1>(key)});

  std::vector<ComparisonRow> rows;
  for (const auto& [algorithm, budget] : groups) {
    for (const auto& pair : pairs) {
      const auto a = cells.find({algorithm, budget, pair.better});
      const auto b = cells.find({algorithm, budget, pair.worse});
      if (a == cells.end() || b == cells.end()) continue;
      std::vector<double> xs, ys;
      for (const auto& [point, q] : a->second) {
        const auto it = b->second.find(point);
        if (it == b->second.end()) break;
        xs.push_back(q);
        ys.push_back(it->second);
      }
      if (xs.size() != a->second.size() || xs.size() != b->second.size() || xs.empty())
        throw std::invalid_argument("unmatched pairing for " + std::string(to_string(algorithm)) + " budget " +
                                    std::to_string(budget) + ": " + std::string(to_string(pair.better)) + " vs " +
                                    std::string(to_string(pair.worse)));
      ComparisonRow row{algorithm, budget, pair, 0, 1.0, 1.0, false};
      row.n = xs.size();
      row.p_value = wilcoxon_one_sided(xs, ys);
      row.p_adjusted = bonferroni(row.p_value, m);
      row.significant = row.p_adjusted < alpha;
      rows.push_back(row);
    }
  }
  return rows;
}

void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows) {
  out << "algorithm,budget,better,worse,n,p_value,p_adjusted,significant\n";
  for (const auto& r : rows) {
    out << to_string(r.algorithm) << ',' << r.budget << ',' << to_string(r.pair.better) << ','
        << to_string(r.pair.worse) << ',' << r.n << ',' << format_double(r.p_value) << ','
        << format_double(r.p_adjusted) << ',' << (r.significant ? "true" : "false") << '\n';
  }
}

// --- Noise analysis -----------------------------------------------------------

NoiseReport noise_statistics(std::vector<NoisePoint> points, double fraction) {
  NoiseReport report;
  report.fraction = fraction;
  report.points = std::move(points);
  const auto& p = report.points;
  if (p.size() >= 2) {
    std::vector<double> xs, ys;
    std::vector<std::pair<double, double>> pairs;
    for (const auto& pt : p) {
      xs.push_back(pt.score_a);
      ys.push_back(pt.score_b);
      pairs.emplace_back(pt.score_a, pt.score_b);
    }
    report.overall_rho = spearman(xs, ys);
    report.top_rho = top_fraction_correlation(pairs, fraction);
  }
  std::size_t best_a = 0, best_b = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i].score_a > p[best_a].score_a) best_a = i;
    if (p[i].score_b > p[best_b].score_b) best_b = i;
  }
  report.argmax_agrees = p.empty() || p[best_a].genotype == p[best_b].genotype;
  return report;
}

NoiseReport noise_analysis(UnitEvaluator& evaluator, const SeedPool& pool, const NoiseSpec& spec) {
  if (pool.partitionings.size() < 2 || pool.seeds.size() < 2)
    throw ConfigError("noise analysis needs two partitionings and two seeds");
  const TrainingUnit a{pool.partitionings[0], 0, pool.seeds[0]};
  const TrainingUnit b{pool.partitionings[1], 0, pool.seeds[1]};
  SplitMix64 rng(spec.sample_seed);
  std::vector<NoisePoint> points;
  points.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const Genotype g = repair(random_genotype(rng));
    points.push_back({g, evaluator.score(g, a), evaluator.score(g, b)});
  }
  NoiseReport report = noise_statistics(std::move(points), spec.fraction);
  report.unit_a = a;
  report.unit_b = b;
  return report;
}

namespace {

std::string digits(const Genotype& g) {
  std::string s;
  for (auto v : g.genes()) s.push_back(static_cast<char>('0' + v));
  return s;
}

std::string unit_text(const TrainingUnit& u) {
  return std::to_string(u.partitioning) + "/" + std::to_string(u.fold) + "/" + std::to_string(u.seed);
}

}  // namespace

void write_noise_pairs_csv(std::ostream& out, const NoiseReport& report) {
  out << "genotype,score_a,score_b\n";
  for (const auto& p : report.points)
    out << digits(p.genotype) << ',' << format_double(p.score_a) << ',' << format_double(p.score_b) << '\n';
}

void write_noise_report_csv(std::ostream& out, const NoiseReport& report) {
  out << "n_samples,unit_a,unit_b,overall_rho,top_fraction,top_rho,argmax_agrees\n";
  out << report.points.size() << ',' << unit_text(report.unit_a) << ',' << unit_text(report.unit_b) << ','
      << opt(report.overall_rho) << ',' << format_double(report.fraction) << ',' << opt(report.top_rho) << ','
      << (report.argmax_agrees ? "true" : "false") << '\n';
}

std::vector<NoisePoint> read_noise_pairs_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "genotype,score_a,score_b")
    throw std::invalid_argument("not a noise pairs file");
  std::vector<NoisePoint> points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 != kNumGenes || c2 == std::string::npos) throw std::invalid_argument("malformed noise pairs line");
    std::vector<int> genes;
    for (std::size_t i = 0; i < kNumGenes; ++i) genes.push_back(line[i] - '0');
    NoisePoint p;
    p.genotype = Genotype::from_ints(genes);
    auto parse = [&](std::size_t from, std::size_t to) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(line.data() + from, line.data() + to, v);
      if (ec != std::errc() || ptr != line.data() + to) throw std::invalid_argument("malformed score in noise pairs");
      return v;
    };
    p.score_a = parse(c1 + 1, c2);
    p.score_b = parse(c2 + 1, line.size());
    points.push_back(p);
  }
  return points;
}

}  // namespace nas
