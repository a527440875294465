// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "instatune/experiment.hpp"

using namespace instatune;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "instatune-test" / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

ExperimentConfig tiny(ExperimentKind kind) {
  ExperimentConfig c = default_config("desk");
  c.kind = kind;
  c.seed = 5;
  c.data = {.train = 96, .held_out = 64, .marker_prob = 0.7};
  c.warmup_epochs = 1;
  c.train.epochs = 2;
  c.train.teacher = {TeacherRegime::until_epoch, 1};
  c.search.algorithms = {"random"};
  c.search.budget = c.search.linas.budget = 6;
  c.search.linas.batch = 3;
  c.derive_seeds();
  return c;
}

Candidate candidate(const SearchSpace& space, const SubnetConfig& c, double acc) {
  Candidate k;
  k.config = c;
  k.encoding = space.encode(c);
  k.accuracy = acc;
  k.macs = macs(space.dims(), c).macs;
  return k;
}

}  // namespace

TEST_CASE("config JSON round trip for every preset and kind") {
  for (const auto& name : preset_names())
    for (auto kind : {ExperimentKind::finetune, ExperimentKind::search, ExperimentKind::cost,
                      ExperimentKind::ablation_teacher, ExperimentKind::ablation_epochs}) {
      ExperimentConfig c = default_config(name);
      c.kind = kind;
      c.seed = 17;
      c.derive_seeds();
      const ArchDims dims = c.space.build().dims();
      if (kind != ExperimentKind::cost && dims.vocab <= dims.classes) {
        // Image presets have no token vocabulary to train the marker task on.
        CHECK_THROWS_AS(config_from_json(to_json(c)), std::invalid_argument);
        c.search.objective = Objective::synthetic;
        if (kind != ExperimentKind::search) continue;
      }
      const auto back = config_from_json(json::parse(to_json(c).dump()));
      CHECK(back == c);
    }
  ExperimentConfig c = default_config("desk");
  c.space.mode = SpaceMode::per_layer;
  c.space.depth = {2, 4};
  c.search.reference = HvReference{0.1, 7e5};
  c.search.nsga2.mutation = 0.25;
  c.search.objective = Objective::synthetic;
  CHECK(config_from_json(to_json(c)) == c);
  // Missing keys keep defaults.
  CHECK(config_from_json(json::object()) == default_config("desk"));
  CHECK(config_from_json(json{{"space", {{"preset", "bert"}}}, {"kind", "cost"}}).search.budget ==
        60);
}

TEST_CASE("unknown keys and wrong types are rejected with their path") {
  auto expect = [](const json& j, const std::string& needle) {
    try {
      config_from_json(j);
      FAIL("accepted: " << j.dump());
    } catch (const std::invalid_argument& e) {
      const std::string what = e.what();
      CHECK_MESSAGE(what.find(needle) != std::string::npos, what);
    }
  };
  expect(json{{"sead", 1}}, "sead");
  expect(json{{"search", {{"nsga2", {{"popsize", 4}}}}}}, "search.nsga2.popsize");
  expect(json{{"space", {{"dims", {{"layer", 4}}}}}}, "space.dims.layer");
  expect(json{{"train", {{"probe", {{"depth", 3}, {"x", 1}}}}}}, "train.probe.x");
  expect(json{{"seed", -1}}, "seed");
  expect(json{{"seed", "7"}}, "seed");
  expect(json{{"train", {{"lr", "fast"}}}}, "train.lr");
  expect(json{{"kind", "grid"}}, "grid");
  expect(json{{"version", 2}}, "version");
  expect(json::array(), "object");
}

TEST_CASE("invalid configs fail before any compute or output") {
  const fs::path out = scratch("invalid");
  std::vector<ExperimentConfig> bad;
  auto c = tiny(ExperimentKind::search);
  c.search.budget = c.search.linas.budget = 0;
  bad.push_back(c);
  c = tiny(ExperimentKind::search);
  c.search.algorithms = {"annealing"};
  bad.push_back(c);
  c = tiny(ExperimentKind::finetune);
  c.train.loss.alpha = 1.5;
  bad.push_back(c);
  c = tiny(ExperimentKind::finetune);
  c.space.heads = {2, 3};  // largest value must be the maximum
  bad.push_back(c);
  c = tiny(ExperimentKind::ablation_teacher);
  c.train.teacher = {};
  bad.push_back(c);
  c = tiny(ExperimentKind::ablation_space);
  c.ablation.spaces = {"desk", "bert"};
  bad.push_back(c);
  c = tiny(ExperimentKind::search);
  c.search.algorithms = {"linas"};
  c.search.linas.batch = 4;  // budget 6 < 2 * batch
  bad.push_back(c);
  c = tiny(ExperimentKind::finetune);
  c.data.marker_prob = 0.0;
  bad.push_back(c);
  for (const auto& b : bad) {
    CHECK_THROWS_AS(run_experiment(b, out), std::invalid_argument);
    CHECK_FALSE(fs::exists(out));
  }
}

TEST_CASE("default output directory honours INSTATUNE_OUT") {
  auto c = tiny(ExperimentKind::search);
  ::unsetenv("INSTATUNE_OUT");
  CHECK(default_output_dir(c) == fs::path("runs") / "search-desk-s5");
  ::setenv("INSTATUNE_OUT", "/tmp/elsewhere", 1);
  CHECK(default_output_dir(c) == fs::path("/tmp/elsewhere/search-desk-s5"));
  c.output = "explicit";
  CHECK(default_output_dir(c) == fs::path("explicit"));
  ::unsetenv("INSTATUNE_OUT");
}

TEST_CASE("load_config reports unreadable and malformed files") {
  const fs::path dir = scratch("cfgfile");
  fs::create_directories(dir);
  CHECK_THROWS_AS(load_config(dir / "absent.json"), std::runtime_error);
  std::ofstream(dir / "broken.json") << "{\"seed\": ";
  CHECK_THROWS_AS(load_config(dir / "broken.json"), std::invalid_argument);
  std::ofstream(dir / "ok.json") << to_json(tiny(ExperimentKind::search)).dump();
  CHECK(load_config(dir / "ok.json") == tiny(ExperimentKind::search));
}

TEST_CASE("cost bundle for the BERT space") {
  auto c = default_config("bert");
  c.kind = ExperimentKind::cost;
  const fs::path out = scratch("cost-bert");
  const auto b = run_experiment(c, out);
  CHECK(b.complete);
  CHECK(b.summary["cost"]["baseline_macs"].get<std::uint64_t>() == 11173625856ULL);
  CHECK(b.summary["cost"]["baseline_gmacs"] == "11.17");
  CHECK(line_count(out / "cost.csv") == 1 + 84);
  CHECK(emit_plot_data(out).empty());
}

TEST_CASE("synthetic search with budget = space size finds the exhaustive front") {
  auto c = tiny(ExperimentKind::search);
  c.search.objective = Objective::synthetic;
  c.search.algorithms = {"random", "linas"};
  c.search.budget = c.search.linas.budget = 18;
  c.search.linas.batch = 6;
  const fs::path out = scratch("synthetic");
  const auto b = run_experiment(c, out);

  const SearchSpace space = c.space.build();
  const auto acc = synthetic_accuracy(space, c.search.synthetic_salt);
  std::vector<Candidate> all;
  for (const auto& cfg : space.enumerate()) all.push_back(candidate(space, cfg, acc(cfg)));
  const auto truth = pareto_front(all);

  const auto rows = read_front(out / "front.csv");
  REQUIRE(rows.size() == truth.size() + 1);
  CHECK(rows[0].encoding == space.encode(space.maximal()).to_string());
  CHECK(rows[0].delta_mac == 0.0);
  CHECK(rows[0].delta_acc == 0.0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& r = rows[i + 1];
    CHECK(r.encoding == truth[i].encoding.to_string());
    CHECK(r.macs == truth[i].macs);
    CHECK(r.accuracy == truth[i].accuracy);
    // Reload recomputes the same deltas bit for bit.
    const auto d = delta({rows[0].accuracy, double(rows[0].macs)}, {r.accuracy, double(r.macs)});
    CHECK(d.delta_mac == r.delta_mac);
    CHECK(d.delta_acc == r.delta_acc);
  }
  REQUIRE(b.summary["front"].size() == truth.size());

  // One hypervolume row per evaluation of every run.
  std::size_t evaluations = 0;
  for (const auto& r : b.summary["search"]["runs"]) evaluations += r["evaluations"].get<std::size_t>();
  CHECK(evaluations == 36);
  CHECK(line_count(out / "plots" / "hypervolume.csv") == 1 + evaluations);
  CHECK(line_count(out / "search_history.jsonl") == evaluations);
  CHECK(line_count(out / "plots" / "fronts.csv") == 1 + 2 * truth.size());
}

TEST_CASE("front CSV edge cases") {
  const fs::path dir = scratch("frontcsv");
  export_front({}, std::nullopt, dir / "empty.csv");
  CHECK(slurp(dir / "empty.csv") == std::string(kFrontHeader) + "\n");
  CHECK(read_front(dir / "empty.csv").empty());

  const SearchSpace space = preset("desk").space;
  const auto base = candidate(space, space.maximal(), 0.9);
  export_front({}, base, dir / "baseline-only.csv");
  CHECK(read_front(dir / "baseline-only.csv").size() == 1);

  const auto small = candidate(space, SubnetConfig::uniform(3, 2, 32), 0.8);
  export_front({base, small}, base, dir / "two.csv");
  const auto rows = read_front(dir / "two.csv");
  REQUIRE(rows.size() == 3);
  CHECK(rows[1].macs < rows[2].macs);  // sorted by MACs after the baseline
  CHECK(rows[1].heads == "2;2;2");
  CHECK(rows[1].delta_mac == doctest::Approx(62.5));

  std::ofstream(dir / "bad.csv") << "a,b\n";
  CHECK_THROWS(read_front(dir / "bad.csv"));
}

TEST_CASE("teacher ablation trains two arms from one warm start") {
  const fs::path out = scratch("abl-teacher");
  const auto b = run_experiment(tiny(ExperimentKind::ablation_teacher), out);
  const auto& arms = b.summary["arms"];
  REQUIRE(arms.contains("teacher"));
  REQUIRE(arms.contains("no-teacher"));
  CHECK(arms["teacher"]["teacher_forwards"].get<std::size_t>() > 0);
  CHECK(arms["no-teacher"]["teacher_forwards"].get<std::size_t>() == 0);
  CHECK(arms["teacher"]["seeds"] == arms["no-teacher"]["seeds"]);
  CHECK(arms["teacher"]["steps"] == arms["no-teacher"]["steps"]);
  std::set<std::string> seen;
  std::ifstream in(out / "plots" / "epochs.csv");
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) seen.insert(line.substr(0, line.find(',')));
  CHECK(seen == std::set<std::string>{"main", "teacher", "no-teacher"});
  CHECK(fs::exists(out / "checkpoints" / "teacher.ckpt"));
  CHECK(fs::exists(out / "checkpoints" / "no-teacher.ckpt"));
}

TEST_CASE("epoch ablation runs every listed length") {
  auto c = tiny(ExperimentKind::ablation_epochs);
  c.ablation.epochs = {1, 2};
  const auto b = run_experiment(c, scratch("abl-epochs"));
  CHECK(b.summary["arms"]["epochs-1"]["steps"].get<std::size_t>() * 2 ==
        b.summary["arms"]["epochs-2"]["steps"].get<std::size_t>());
}

TEST_CASE("space ablation emits fronts for both presets") {
  auto c = tiny(ExperimentKind::ablation_space);
  c.search.objective = Objective::synthetic;
  c.search.budget = c.search.linas.budget = 27;
  const fs::path out = scratch("abl-space");
  const auto b = run_experiment(c, out);
  for (const auto& name : c.ablation.spaces) {
    REQUIRE(b.summary["spaces"].contains(name));
    CHECK(!b.summary["spaces"][name]["front"].empty());
  }
  std::map<std::string, std::size_t> rows;
  std::set<std::size_t> wide_depths;
  std::ifstream in(out / "plots" / "space_fronts.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "space,encoding,depth,heads,ffn,accuracy,macs,on_front");
  while (std::getline(in, line)) {
    const auto space = line.substr(0, line.find(','));
    ++rows[space];
    if (space == "desk-wide-depth") {
      const auto rest = line.substr(line.find(',') + 1);
      const auto depth = rest.substr(rest.find(',') + 1);
      wide_depths.insert(std::stoul(depth.substr(0, depth.find(','))));
    }
  }
  CHECK(rows["desk"] == 18);
  CHECK(rows["desk-wide-depth"] == 27);
  CHECK(wide_depths == std::set<std::size_t>{2, 3, 4});
}

TEST_CASE("incomplete bundles list their missing stages") {
  const fs::path out = scratch("incomplete");
  CHECK_THROWS_WITH_AS(emit_plot_data(out), doctest::Contains("missing summary.json"),
                       std::runtime_error);

  // A stage that fails mid-run leaves an incomplete summary behind.
  fs::create_directories(out);
  std::ofstream(out / "checkpoints") << "not a directory";
  CHECK_THROWS(run_experiment(tiny(ExperimentKind::finetune), out));
  const auto s = load_summary(out / "summary.json");
  CHECK(s["complete"] == false);
  CHECK(s.contains("error"));
  CHECK_THROWS_WITH_AS(emit_plot_data(out), doctest::Contains("missing stages: warmup, finetune"),
                       std::runtime_error);
}

TEST_CASE("tampered deltas are detected on load") {
  auto c = tiny(ExperimentKind::search);
  c.search.objective = Objective::synthetic;
  const fs::path out = scratch("tamper");
  run_experiment(c, out);
  json s = load_summary(out / "summary.json");
  s["front"][0]["delta_mac"] = s["front"][0]["delta_mac"].get<double>() + 0.01;
  std::ofstream(out / "summary.json") << s.dump(2);
  CHECK_THROWS_WITH_AS(load_summary(out / "summary.json"),
                       doctest::Contains("does not match"), std::runtime_error);
  CHECK_THROWS(emit_plot_data(out));
}

TEST_CASE("sha256 of known inputs") {
  const fs::path dir = scratch("sha");
  fs::create_directories(dir);
  std::ofstream(dir / "abc", std::ios::binary) << "abc";
  CHECK(sha256_file(dir / "abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  std::ofstream(dir / "empty", std::ios::binary);
  CHECK(sha256_file(dir / "empty") ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("format_number round trips") {
  for (double v : {0.1, 1.0 / 3.0, 62.5, -0.6493506493506493, 1e-300, 11173625856.0})
    CHECK(std::stod(format_number(v)) == v);
  CHECK(format_number(62.5) == "62.5");
}

TEST_CASE("identical configs give byte-identical bundles") {
  auto c = tiny(ExperimentKind::search);
  c.search.algorithms = {"random", "nsga2", "linas"};
  c.search.nsga2.population = 4;
  c.search.nsga2.generations = 1;
  const fs::path a = scratch("det-a"), b = scratch("det-b");
  run_experiment(c, a);
  run_experiment(c, b);
  for (const char* f : {"summary.json", "front.csv", "search_history.jsonl", "train_steps.jsonl",
                        "config.json", "checkpoints/supernet.ckpt", "plots/hypervolume.csv"})
    CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
}
