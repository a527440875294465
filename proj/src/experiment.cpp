// SPDX-License-Identifier: Apache-2.0
#include "instatune/experiment.hpp"

#include <fmt/format.h>
#include <openssl/evp.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace instatune {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::finetune: return "finetune";
    case ExperimentKind::search: return "search";
    case ExperimentKind::cost: return "cost";
    case ExperimentKind::ablation_teacher: return "ablation-teacher";
    case ExperimentKind::ablation_space: return "ablation-space";
    case ExperimentKind::ablation_epochs: return "ablation-epochs";
  }
  return "search";
}

ExperimentKind parse_experiment_kind(const std::string& text) {
  for (auto k : {ExperimentKind::finetune, ExperimentKind::search, ExperimentKind::cost,
                 ExperimentKind::ablation_teacher, ExperimentKind::ablation_space,
                 ExperimentKind::ablation_epochs})
    if (to_string(k) == text) return k;
  throw std::invalid_argument("unknown experiment kind '" + text + "'");
}

namespace {

std::string to_string(Objective o) {
  return o == Objective::supernet ? "supernet" : "synthetic";
}

Objective parse_objective(const std::string& text) {
  if (text == "supernet") return Objective::supernet;
  if (text == "synthetic") return Objective::synthetic;
  throw std::invalid_argument("unknown search objective '" + text + "'");
}

bool trains(const ExperimentConfig& c) {
  if (c.kind == ExperimentKind::cost) return false;
  if (c.kind == ExperimentKind::search || c.kind == ExperimentKind::ablation_space)
    return c.search.objective == Objective::supernet;
  return true;
}

bool searches(const ExperimentConfig& c) {
  return c.kind == ExperimentKind::search || c.kind == ExperimentKind::ablation_space;
}

}  // namespace

SearchSpace SpaceSpec::build() const {
  const Preset p = instatune::preset(this->preset);
  const SearchSpace& base = p.space;
  return SearchSpace(dims.value_or(base.dims()), depth.empty() ? base.depth_values() : depth,
                     heads.empty() ? base.head_values() : heads,
                     ffn.empty() ? base.ffn_values() : ffn, mode.value_or(base.mode()));
}

void ExperimentConfig::derive_seeds() { train.seeds = TrainSeeds::from_base(seed); }

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  std::optional<SearchSpace> built;
  try {
    built.emplace(space.build());
  } catch (const std::exception& e) {
    fail(std::string("space: ") + e.what());
  }
  const ArchDims& dims = built->dims();
  if (data.train == 0 || data.held_out == 0) fail("data sizes must be positive");
  if (!(data.marker_prob > 0.0 && data.marker_prob <= 1.0))
    fail("data.marker_prob must lie in (0, 1]");
  if (trains(*this)) {
    if (dims.vocab <= dims.classes) fail("marker task needs vocab > classes");
    if (warmup_epochs == 0) fail("warmup_epochs must be >= 1");
    try {
      train.validate(dims);
    } catch (const std::exception& e) {
      fail(std::string("train: ") + e.what());
    }
    if (!built->contains(train.probe) && train.probe.depth > 0 &&
        kind != ExperimentKind::ablation_space)
      fail("train.probe " + train.probe.to_string() + " is outside the search space");
  }
  if (kind == ExperimentKind::ablation_teacher && train.teacher.regime == TeacherRegime::none)
    fail("ablation-teacher needs a teacher regime other than 'none'");
  if (searches(*this)) {
    if (search.algorithms.empty()) fail("search.algorithms is empty");
    for (const auto& a : search.algorithms)
      if (a != "linas" && a != "nsga2" && a != "random")
        fail("unknown search algorithm '" + a + "'");
    if (search.runs == 0) fail("search.runs must be >= 1");
    if (search.budget == 0) fail("search.budget must be >= 1");
    try {
      if (std::count(search.algorithms.begin(), search.algorithms.end(), "linas")) {
        if (search.linas.budget != search.budget)
          fail("search.linas budget must match search.budget");
        search.linas.validate();
      }
      if (std::count(search.algorithms.begin(), search.algorithms.end(), "nsga2"))
        search.nsga2.validate();
    } catch (const std::invalid_argument& e) {
      fail(std::string("search: ") + e.what());
    }
    if (search.reference && !(search.reference->macs > 0.0))
      fail("search.reference.macs must be positive");
  }
  if (kind == ExperimentKind::ablation_epochs) {
    if (ablation.epochs.empty()) fail("ablation.epochs is empty");
    for (auto e : ablation.epochs)
      if (e == 0) fail("ablation.epochs entries must be >= 1");
  }
  if (kind == ExperimentKind::ablation_space) {
    if (ablation.spaces.size() < 2) fail("ablation.spaces needs at least two presets");
    for (const auto& name : ablation.spaces) {
      try {
        const auto p = preset(name);
        if (trains(*this) && !(p.space.dims() == dims))
          fail("ablation space '" + name + "' has different dims from the main space");
      } catch (const std::invalid_argument& e) {
        if (std::string(e.what()).starts_with("config:")) throw;
        fail(e.what());
      }
    }
  }
}

ExperimentConfig default_config(const std::string& preset_name) {
  ExperimentConfig c;
  c.space.preset = preset_name;
  const SearchSpace space = c.space.build();
  c.train.probe = SubnetConfig::uniform(space.depth_values().front(),
                                        space.head_values().front(),
                                        space.ffn_values().front());
  c.train.loss = LossWeights{.alpha = 0.3, .gamma = 0, .rho = 1.0, .samples = 1};
  c.train.teacher = {TeacherRegime::until_epoch, 10};
  c.search.budget = std::min<std::uint64_t>(space.size().value_or(60), 60);
  c.search.linas.budget = c.search.budget;
  c.search.linas.batch = std::max<std::size_t>(1, std::min<std::size_t>(10, c.search.budget / 2));
  c.derive_seeds();
  return c;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

json config_json(const SubnetConfig& c) {
  return {{"depth", c.depth}, {"heads", c.heads}, {"ffn", c.ffn}};
}

json dims_json(const ArchDims& d) {
  return {{"layers", d.layers}, {"heads", d.heads},     {"head_dim", d.head_dim},
          {"embed", d.embed},   {"ffn", d.ffn},         {"seq_len", d.seq_len},
          {"vocab", d.vocab},   {"classes", d.classes}, {"patch_dim", d.patch_dim}};
}

bool non_negative(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Strict object reader: every key must be consumed.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw std::invalid_argument("config: " + where_ + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }
  std::string path(const char* key) const {
    return where_.empty() ? key : where_ + "." + key;
  }

  void get(const char* key, std::size_t& out) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (!non_negative(v)) bad(key, "a non-negative integer");
    out = v.get<std::size_t>();
  }
  void get(const char* key, double& out) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (!v.is_number()) bad(key, "a number");
    out = v.get<double>();
  }
  void get(const char* key, bool& out) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (!v.is_boolean()) bad(key, "a boolean");
    out = v.get<bool>();
  }
  void get(const char* key, std::string& out) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (!v.is_string()) bad(key, "a string");
    out = v.get<std::string>();
  }
  void get(const char* key, std::vector<std::size_t>& out) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (!v.is_array()) bad(key, "an array of non-negative integers");
    out.clear();
    for (const auto& e : v) {
      if (!non_negative(e)) bad(key, "an array of non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
  }
  void get(const char* key, std::vector<std::string>& out) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (!v.is_array()) bad(key, "an array of strings");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_string()) bad(key, "an array of strings");
      out.push_back(e.get<std::string>());
    }
  }
  // Null clears an optional.
  bool is_null(const char* key) const { return has(key) && j_.at(key).is_null(); }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!used_.contains(key))
        throw std::invalid_argument("config: unknown key '" + path(key.c_str()) + "'");
  }

 private:
  [[noreturn]] void bad(const char* key, const char* what) const {
    throw std::invalid_argument("config: '" + path(key) + "' must be " + what);
  }
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

SubnetConfig read_subnet(const json& j, const std::string& where) {
  Reader r(j, where);
  SubnetConfig c;
  r.get("depth", c.depth);
  r.get("heads", c.heads);
  r.get("ffn", c.ffn);
  r.finish();
  return c;
}

ArchDims read_dims(const json& j, const std::string& where) {
  Reader r(j, where);
  ArchDims d;
  r.get("layers", d.layers);
  r.get("heads", d.heads);
  r.get("head_dim", d.head_dim);
  r.get("embed", d.embed);
  r.get("ffn", d.ffn);
  r.get("seq_len", d.seq_len);
  r.get("vocab", d.vocab);
  r.get("classes", d.classes);
  r.get("patch_dim", d.patch_dim);
  r.finish();
  return d;
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json space = {{"preset", c.space.preset},
                {"dims", c.space.dims ? dims_json(*c.space.dims) : json(nullptr)},
                {"mode", c.space.mode ? json(to_string(*c.space.mode)) : json(nullptr)},
                {"depth", c.space.depth},
                {"heads", c.space.heads},
                {"ffn", c.space.ffn}};
  const auto& t = c.train;
  json train = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"lr", t.adam.lr},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"eps", t.adam.eps},
                {"alpha", t.loss.alpha},
                {"rho", t.loss.rho},
                {"samples", t.loss.samples},
                {"teacher", to_string(t.teacher.regime)},
                {"teacher_until", t.teacher.until_epoch},
                {"probe", config_json(t.probe)}};
  const auto& s = c.search;
  json search = {
      {"algorithms", s.algorithms},
      {"budget", s.budget},
      {"runs", s.runs},
      {"objective", to_string(s.objective)},
      {"synthetic_salt", s.synthetic_salt},
      {"linas",
       {{"batch", s.linas.batch},
        {"inner_population", s.linas.inner.population},
        {"inner_generations", s.linas.inner.generations},
        {"ridge", s.linas.ridge}}},
      {"nsga2",
       {{"population", s.nsga2.population},
        {"generations", s.nsga2.generations},
        {"mutation", s.nsga2.mutation ? json(*s.nsga2.mutation) : json(nullptr)},
        {"crossover", s.nsga2.crossover},
        {"duplicate_retries", s.nsga2.duplicate_retries}}},
      {"reference", s.reference ? json{{"accuracy", s.reference->accuracy},
                                       {"macs", s.reference->macs}}
                                : json(nullptr)}};
  return {{"version", kConfigVersion},
          {"kind", to_string(c.kind)},
          {"seed", c.seed},
          {"output", c.output},
          {"space", space},
          {"data",
           {{"train", c.data.train},
            {"held_out", c.data.held_out},
            {"marker_prob", c.data.marker_prob}}},
          {"warmup_epochs", c.warmup_epochs},
          {"train", train},
          {"search", search},
          {"cost",
           {{"include_embeddings", c.cost.include_embeddings},
            {"include_classifier", c.cost.include_classifier}}},
          {"ablation", {{"epochs", c.ablation.epochs}, {"spaces", c.ablation.spaces}}}};
}

ExperimentConfig config_from_json(const json& j) {
  Reader top(j, "");
  std::size_t version = kConfigVersion;
  top.get("version", version);
  if (version != static_cast<std::size_t>(kConfigVersion))
    throw std::invalid_argument("config: unsupported version " + std::to_string(version));

  std::string preset_name = "desk";
  if (top.has("space")) {
    const json& sp = j.at("space");
    if (sp.is_object() && sp.contains("preset") && sp.at("preset").is_string())
      preset_name = sp.at("preset").get<std::string>();
  }
  ExperimentConfig c;
  try {
    c = default_config(preset_name);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("config: space.preset: ") + e.what());
  }

  std::string kind = to_string(c.kind);
  top.get("kind", kind);
  c.kind = parse_experiment_kind(kind);
  top.get("seed", c.seed);
  top.get("output", c.output);
  top.get("warmup_epochs", c.warmup_epochs);

  if (top.has("space")) {
    Reader r(top.raw("space"), "space");
    r.get("preset", c.space.preset);
    if (r.has("dims") && !r.is_null("dims"))
      c.space.dims = read_dims(r.raw("dims"), "space.dims");
    else if (r.has("dims"))
      r.raw("dims");
    if (r.has("mode") && !r.is_null("mode")) {
      std::string mode;
      r.get("mode", mode);
      c.space.mode = parse_space_mode(mode);
    } else if (r.has("mode")) {
      r.raw("mode");
    }
    r.get("depth", c.space.depth);
    r.get("heads", c.space.heads);
    r.get("ffn", c.space.ffn);
    r.finish();
  }
  if (top.has("data")) {
    Reader r(top.raw("data"), "data");
    r.get("train", c.data.train);
    r.get("held_out", c.data.held_out);
    r.get("marker_prob", c.data.marker_prob);
    r.finish();
  }
  if (top.has("train")) {
    Reader r(top.raw("train"), "train");
    auto& t = c.train;
    r.get("epochs", t.epochs);
    r.get("batch_size", t.batch_size);
    r.get("lr", t.adam.lr);
    r.get("beta1", t.adam.beta1);
    r.get("beta2", t.adam.beta2);
    r.get("eps", t.adam.eps);
    r.get("alpha", t.loss.alpha);
    r.get("rho", t.loss.rho);
    r.get("samples", t.loss.samples);
    std::string regime = to_string(t.teacher.regime);
    r.get("teacher", regime);
    t.teacher.regime = parse_teacher_regime(regime);
    r.get("teacher_until", t.teacher.until_epoch);
    if (r.has("probe")) t.probe = read_subnet(r.raw("probe"), "train.probe");
    r.finish();
  }
  if (top.has("search")) {
    Reader r(top.raw("search"), "search");
    auto& s = c.search;
    r.get("algorithms", s.algorithms);
    r.get("budget", s.budget);
    r.get("runs", s.runs);
    std::string objective = to_string(s.objective);
    r.get("objective", objective);
    s.objective = parse_objective(objective);
    r.get("synthetic_salt", s.synthetic_salt);
    if (r.has("linas")) {
      Reader l(r.raw("linas"), "search.linas");
      l.get("batch", s.linas.batch);
      l.get("inner_population", s.linas.inner.population);
      l.get("inner_generations", s.linas.inner.generations);
      l.get("ridge", s.linas.ridge);
      l.finish();
    }
    if (r.has("nsga2")) {
      Reader n(r.raw("nsga2"), "search.nsga2");
      n.get("population", s.nsga2.population);
      n.get("generations", s.nsga2.generations);
      if (n.has("mutation") && !n.is_null("mutation")) {
        double m = 0.0;
        n.get("mutation", m);
        s.nsga2.mutation = m;
      } else if (n.has("mutation")) {
        n.raw("mutation");
        s.nsga2.mutation.reset();
      }
      n.get("crossover", s.nsga2.crossover);
      n.get("duplicate_retries", s.nsga2.duplicate_retries);
      n.finish();
    }
    if (r.has("reference") && !r.is_null("reference")) {
      Reader ref(r.raw("reference"), "search.reference");
      HvReference h;
      ref.get("accuracy", h.accuracy);
      ref.get("macs", h.macs);
      ref.finish();
      s.reference = h;
    } else if (r.has("reference")) {
      r.raw("reference");
      s.reference.reset();
    }
    r.finish();
    s.linas.budget = s.budget;
  }
  if (top.has("cost")) {
    Reader r(top.raw("cost"), "cost");
    r.get("include_embeddings", c.cost.include_embeddings);
    r.get("include_classifier", c.cost.include_classifier);
    r.finish();
  }
  if (top.has("ablation")) {
    Reader r(top.raw("ablation"), "ablation");
    r.get("epochs", c.ablation.epochs);
    r.get("spaces", c.ablation.spaces);
    r.finish();
  }
  top.finish();
  c.derive_seeds();
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

fs::path default_output_dir(const ExperimentConfig& c) {
  if (!c.output.empty()) return c.output;
  const char* root = std::getenv("INSTATUNE_OUT");
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  return base / fmt::format("{}-{}-s{}", to_string(c.kind), c.space.preset, c.seed);
}

// ---------------------------------------------------------------------------
// Small file helpers

std::string format_number(double value) { return fmt::format("{}", value); }

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256 init failed");
  }
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

namespace {

std::ofstream open_out(const fs::path& path, bool append = false) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void write_json(const fs::path& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

json candidate_json(const Candidate& c, const std::optional<Candidate>& baseline) {
  json j = {{"encoding", c.encoding.to_string()},
            {"config", config_json(c.config)},
            {"accuracy", c.accuracy},
            {"macs", c.macs}};
  if (baseline) {
    const auto d = delta({baseline->accuracy, static_cast<double>(baseline->macs)},
                         {c.accuracy, static_cast<double>(c.macs)});
    j["delta_mac"] = d.delta_mac;
    j["delta_acc"] = d.delta_acc;
  }
  return j;
}

std::string csv_row(const Candidate& c, const DeltaReport& d) {
  return fmt::format("{},{},{},{},{},{},{},{}", c.encoding.to_string(), c.config.depth,
                     join(c.config.heads), join(c.config.ffn), format_number(c.accuracy),
                     c.macs, format_number(d.delta_mac), format_number(d.delta_acc));
}

}  // namespace

void export_front(const std::vector<Candidate>& front, const std::optional<Candidate>& baseline,
                  const fs::path& path) {
  auto out = open_out(path);
  out << kFrontHeader << '\n';
  if (baseline) out << csv_row(*baseline, {}) << '\n';
  std::vector<Candidate> sorted = front;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const Candidate& a, const Candidate& b) { return a.macs < b.macs; });
  for (const auto& c : sorted) {
    DeltaReport d;
    if (baseline)
      d = delta({baseline->accuracy, static_cast<double>(baseline->macs)},
                {c.accuracy, static_cast<double>(c.macs)});
    out << csv_row(c, d) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<FrontRow> read_front(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kFrontHeader)
    throw std::runtime_error(path.string() + ": unexpected header");
  std::vector<FrontRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 8) throw std::runtime_error(path.string() + ": bad row '" + line + "'");
    FrontRow r;
    r.encoding = f[0];
    r.depth = std::stoull(f[1]);
    r.heads = f[2];
    r.ffn = f[3];
    r.accuracy = std::stod(f[4]);
    r.macs = std::stoull(f[5]);
    r.delta_mac = std::stod(f[6]);
    r.delta_acc = std::stod(f[7]);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

void verify_deltas(const json& node, const std::string& where) {
  if (node.is_object()) {
    if (node.contains("baseline") && node.contains("front")) {
      const json& b = node.at("baseline");
      const Measurement base{b.at("accuracy").get<double>(), b.at("macs").get<double>()};
      for (const auto& m : node.at("front")) {
        const auto d = delta(base, {m.at("accuracy").get<double>(), m.at("macs").get<double>()});
        if (d.delta_mac != m.at("delta_mac").get<double>() ||
            d.delta_acc != m.at("delta_acc").get<double>())
          throw std::runtime_error("summary " + where + ": stored delta for " +
                                   m.at("encoding").get<std::string>() +
                                   " does not match its accuracy and MACs");
      }
    }
    for (const auto& [k, v] : node.items()) verify_deltas(v, where + "." + k);
  } else if (node.is_array()) {
    for (std::size_t i = 0; i < node.size(); ++i)
      verify_deltas(node[i], where + "[" + std::to_string(i) + "]");
  }
}

}  // namespace

json load_summary(const fs::path& path) {
  json j = read_json(path);
  verify_deltas(j, "");
  return j;
}

// ---------------------------------------------------------------------------
// Pipeline

ExperimentData experiment_data(const ExperimentConfig& c, const ArchDims& dims) {
  return {make_marker_task(dims, c.data.train, c.seed + 3, c.data.marker_prob),
          make_marker_task(dims, c.data.held_out, c.seed + 4, c.data.marker_prob)};
}

namespace {

struct Pipeline {
  ExperimentConfig cfg;
  fs::path dir;
  std::ostream* progress;
  json summary;
  std::vector<std::string> done;

  void note(const std::string& msg) {
    if (progress) *progress << msg << std::endl;
  }

  void stage_done(const std::string& name) {
    done.push_back(name);
    summary["stages_done"] = done;
  }


  json checkpoint(const SupernetParams& p, const std::string& name) {
    const fs::path rel = fs::path("checkpoints") / (name + ".ckpt");
    fs::create_directories(dir / "checkpoints");
    save_checkpoint(p, dir / rel);
    return {{"path", rel.generic_string()}, {"sha256", sha256_file(dir / rel)}};
  }

  void log_train(const TrainLog& log, const std::string& arm, const std::string& phase) {
    auto steps = open_out(dir / "train_steps.jsonl", true);
    for (const auto& s : log.steps) {
      std::vector<std::string> sampled;
      for (const auto& c : s.sampled) sampled.push_back(c.to_string());
      const auto& t = s.terms;
      json line = {{"arm", arm},
                   {"phase", phase},
                   {"step", s.step},
                   {"epoch", s.epoch},
                   {"gamma", s.gamma},
                   {"teacher_forward", s.teacher_forward},
                   {"total", t.total},
                   {"ce_supernet", t.ce_supernet},
                   {"ce_subnets", t.ce_subnets},
                   {"kl_supernet_teacher", t.kl_supernet_teacher},
                   {"kl_subnet_supernet", t.kl_subnet_supernet},
                   {"kl_subnet_teacher", t.kl_subnet_teacher},
                   {"sampled", sampled}};
      steps << line.dump() << '\n';
    }
    auto epochs = open_out(dir / "train_epochs.jsonl", true);
    for (const auto& e : log.epochs)
      epochs << json{{"arm", arm},
                     {"phase", phase},
                     {"epoch", e.epoch},
                     {"mean_loss", e.mean_loss},
                     {"supernet_accuracy", e.supernet_accuracy},
                     {"probe_accuracy", e.probe_accuracy},
                     {"teacher_steps", e.teacher_steps}}
                    .dump()
             << '\n';
  }

  static json train_stats(const TrainLog& log) {
    json j = {{"steps", log.steps.size()}, {"teacher_forwards", log.teacher_forwards}};
    if (!log.epochs.empty()) {
      const auto &first = log.epochs.front(), &last = log.epochs.back();
      j["initial_loss"] = first.mean_loss;
      j["final_loss"] = last.mean_loss;
      j["loss_ratio"] = first.mean_loss > 0 ? last.mean_loss / first.mean_loss : 0.0;
      j["supernet_accuracy"] = last.supernet_accuracy;
      j["probe_accuracy"] = last.probe_accuracy;
    }
    return j;
  }

  struct Trained {
    SupernetParams student, teacher;
    Dataset train, held_out;
  };

  Trained warm_up(const SearchSpace& space) {
    const ArchDims& dims = space.dims();
    Trained t;
    auto data = experiment_data(cfg, dims);
    t.train = std::move(data.train);
    t.held_out = std::move(data.held_out);
    TrainConfig wc = cfg.train;
    wc.epochs = cfg.warmup_epochs;
    wc.teacher = {};
    if (!space.contains(wc.probe)) wc.probe = space.maximal();
    note(fmt::format("warm-up: {} epochs on {} samples", wc.epochs, t.train.size()));
    auto ws = pretrain_and_freeze_teacher(dims, t.train, t.held_out, wc);
    log_train(ws.log, "main", "warmup");
    summary["train"]["warmup"] = train_stats(ws.log);
    summary["checkpoints"]["warmup"] = checkpoint(ws.teacher, "warmup");
    t.student = std::move(ws.student);
    t.teacher = std::move(ws.teacher);
    stage_done("warmup");
    return t;
  }

  TrainLog fine_tune(Trained& t, const SearchSpace& space, TrainConfig tc,
                     const std::string& arm) {
    if (!space.contains(tc.probe)) tc.probe = space.maximal();
    note(fmt::format("fine-tune [{}]: {} epochs, teacher {}", arm, tc.epochs,
                     to_string(tc.teacher.regime)));
    auto log = finetune_elastic(t.student, t.teacher, space, t.train, t.held_out, tc);
    log_train(log, arm, "finetune");
    return log;
  }

  Candidate baseline_of(const SearchSpace& space, const Evaluator& eval) {
    Candidate b;
    b.config = space.maximal();
    b.encoding = space.encode(b.config);
    b.accuracy = eval.accuracy(b.config);
    b.macs = macs(space.dims(), b.config, eval.cost).macs;
    return b;
  }

  json run_searches(const SearchSpace& space, const Evaluator& eval,
                    const std::string& space_name, std::vector<Candidate>& pool) {
    json runs = json::array();
    auto hist = open_out(dir / "search_history.jsonl", true);
    for (const auto& algo : cfg.search.algorithms)
      for (std::size_t k = 0; k < cfg.search.runs; ++k) {
        const std::uint64_t seed = cfg.seed + 100 + k;
        note(fmt::format("search [{} {}]: run {} seed {}", space_name, algo, k, seed));
        SearchHistory h;
        if (algo == "random")
          h = random_search(space, eval, cfg.search.budget, seed);
        else if (algo == "nsga2")
          h = nsga2(space, eval, cfg.search.nsga2, seed);
        else
          h = linas(space, eval, cfg.search.linas, seed);
        for (std::size_t i = 0; i < h.evaluated.size(); ++i) {
          const auto& c = h.evaluated[i];
          hist << json{{"space", space_name},     {"algorithm", algo},
                       {"run", k},                {"seed", seed},
                       {"index", c.index},        {"iteration", c.iteration},
                       {"encoding", c.encoding.to_string()},
                       {"depth", c.config.depth}, {"heads", c.config.heads},
                       {"ffn", c.config.ffn},     {"accuracy", c.accuracy},
                       {"macs", c.macs},          {"hypervolume", h.hypervolume[i]}}
                      .dump()
               << '\n';
        }
        runs.push_back({{"algorithm", algo},
                        {"run", k},
                        {"seed", seed},
                        {"evaluations", h.evaluated.size()},
                        {"final_hypervolume", h.final_hypervolume()},
                        {"reference", {{"accuracy", h.reference.accuracy},
                                       {"macs", h.reference.macs}}}});
        pool.insert(pool.end(), h.evaluated.begin(), h.evaluated.end());
      }
    return runs;
  }

  static std::vector<Candidate> unique_front(std::vector<Candidate> pool) {
    std::vector<Candidate> uniq;
    std::set<ArchEncoding> seen;
    for (auto& c : pool)
      if (seen.insert(c.encoding).second) uniq.push_back(std::move(c));
    return pareto_front(uniq);
  }

  json front_block(const Candidate& base, const std::vector<Candidate>& front) {
    json j;
    j["baseline"] = candidate_json(base, std::nullopt);
    j["baseline"]["params"] = params(cfg.space.build().dims(), base.config);
    j["front"] = json::array();
    for (const auto& c : front) j["front"].push_back(candidate_json(c, base));
    return j;
  }

  // --- kinds -------------------------------------------------------------

  void run_cost() {
    const SearchSpace space = cfg.space.build();
    const auto& dims = space.dims();
    const auto base = macs(dims, space.maximal(), cfg.cost);
    auto out = open_out(dir / "cost.csv");
    out << "encoding,depth,heads,ffn,macs,params,delta_mac\n";
    const auto size = space.size();
    std::vector<SubnetConfig> configs;
    if (size && *size <= 100000)
      configs = space.enumerate();
    else
      configs.push_back(space.maximal());
    for (const auto& c : configs) {
      const auto r = macs(dims, c, cfg.cost);
      const double d = 100.0 * (static_cast<double>(base.macs) - static_cast<double>(r.macs)) /
                       static_cast<double>(base.macs);
      out << fmt::format("{},{},{},{},{},{},{}\n", space.encode(c).to_string(), c.depth,
                         join(c.heads), join(c.ffn), r.macs, r.params, format_number(d));
    }
    summary["cost"] = {{"baseline_macs", base.macs},
                       {"baseline_gmacs", fmt::format("{:.2f}", base.macs / 1e9)},
                       {"baseline_params", base.params},
                       {"embedding_macs", base.embeddings},
                       {"classifier_macs", base.classifier},
                       {"configs", configs.size()}};
    note(fmt::format("baseline MACs: {} ({:.2f} G)", base.macs, base.macs / 1e9));
    stage_done("cost");
  }

  void run_finetune() {
    const SearchSpace space = cfg.space.build();
    auto t = warm_up(space);
    auto log = fine_tune(t, space, cfg.train, "main");
    summary["train"]["finetune"] = train_stats(log);
    summary["checkpoints"]["supernet"] = checkpoint(t.student, "supernet");
    stage_done("finetune");
  }

  void run_search() {
    const SearchSpace space = cfg.space.build();
    std::optional<Trained> t;
    Evaluator eval{{}, cfg.cost, cfg.search.reference};
    if (cfg.search.objective == Objective::supernet) {
      t = warm_up(space);
      auto log = fine_tune(*t, space, cfg.train, "main");
      summary["train"]["finetune"] = train_stats(log);
      summary["checkpoints"]["supernet"] = checkpoint(t->student, "supernet");
      stage_done("finetune");
      eval.accuracy = [&t](const SubnetConfig& c) {
        return evaluate(t->student, c, t->held_out);
      };
    } else {
      eval.accuracy = synthetic_accuracy(space, cfg.search.synthetic_salt);
    }
    std::vector<Candidate> pool;
    summary["search"]["runs"] = run_searches(space, eval, cfg.space.preset, pool);
    const auto base = baseline_of(space, eval);
    const auto front = unique_front(std::move(pool));
    export_front(front, base, dir / "front.csv");
    const json block = front_block(base, front);
    summary["baseline"] = block["baseline"];
    summary["front"] = block["front"];
    stage_done("search");
  }

  void run_teacher_ablation() {
    const SearchSpace space = cfg.space.build();
    const auto t0 = warm_up(space);
    json arms;
    for (bool with_teacher : {true, false}) {
      const std::string arm = with_teacher ? "teacher" : "no-teacher";
      Trained t = t0;
      TrainConfig tc = cfg.train;
      if (!with_teacher) tc.teacher = {};
      const auto log = fine_tune(t, space, tc, arm);
      arms[arm] = train_stats(log);
      arms[arm]["teacher"] = to_string(tc.teacher.regime);
      arms[arm]["teacher_until"] = tc.teacher.until_epoch;
      arms[arm]["seeds"] = {tc.seeds.init, tc.seeds.sampling, tc.seeds.data};
      arms[arm]["checkpoint"] = checkpoint(t.student, arm);
      stage_done("arm:" + arm);
    }
    summary["arms"] = arms;
  }

  void run_epoch_ablation() {
    const SearchSpace space = cfg.space.build();
    const auto t0 = warm_up(space);
    json arms;
    for (auto epochs : cfg.ablation.epochs) {
      const std::string arm = fmt::format("epochs-{}", epochs);
      Trained t = t0;
      TrainConfig tc = cfg.train;
      tc.epochs = epochs;
      const auto log = fine_tune(t, space, tc, arm);
      arms[arm] = train_stats(log);
      arms[arm]["epochs"] = epochs;
      arms[arm]["checkpoint"] = checkpoint(t.student, arm);
      stage_done("arm:" + arm);
    }
    summary["arms"] = arms;
  }

  void run_space_ablation() {
    json spaces;
    std::optional<Trained> t0;
    for (const auto& name : cfg.ablation.spaces) {
      SpaceSpec spec = cfg.space;
      spec.preset = name;
      spec.depth.clear();
      const SearchSpace space = spec.build();
      Evaluator eval{{}, cfg.cost, cfg.search.reference};
      std::optional<Trained> t;
      if (cfg.search.objective == Objective::supernet) {
        if (!t0) t0 = warm_up(space);
        t = *t0;
        const auto log = fine_tune(*t, space, cfg.train, name);
        spaces[name]["train"] = train_stats(log);
        spaces[name]["checkpoint"] = checkpoint(t->student, name);
        eval.accuracy = [&t](const SubnetConfig& c) {
          return evaluate(t->student, c, t->held_out);
        };
      } else {
        eval.accuracy = synthetic_accuracy(space, cfg.search.synthetic_salt);
      }
      std::vector<Candidate> pool;
      spaces[name]["runs"] = run_searches(space, eval, name, pool);
      const auto base = baseline_of(space, eval);
      const auto front = unique_front(std::move(pool));
      const json block = front_block(base, front);
      spaces[name]["baseline"] = block["baseline"];
      spaces[name]["front"] = block["front"];
      spaces[name]["depth_values"] = space.depth_values();
      stage_done("space:" + name);
    }
    summary["spaces"] = spaces;
  }

  std::vector<std::string> planned() const {
    std::vector<std::string> p;
    switch (cfg.kind) {
      case ExperimentKind::cost: return {"cost"};
      case ExperimentKind::finetune: return {"warmup", "finetune"};
      case ExperimentKind::search:
        if (cfg.search.objective == Objective::supernet) p = {"warmup", "finetune"};
        p.push_back("search");
        return p;
      case ExperimentKind::ablation_teacher: return {"warmup", "arm:teacher", "arm:no-teacher"};
      case ExperimentKind::ablation_epochs:
        p.push_back("warmup");
        for (auto e : cfg.ablation.epochs) p.push_back(fmt::format("arm:epochs-{}", e));
        return p;
      case ExperimentKind::ablation_space:
        if (cfg.search.objective == Objective::supernet) p.push_back("warmup");
        for (const auto& s : cfg.ablation.spaces) p.push_back("space:" + s);
        return p;
    }
    return p;
  }
};

}  // namespace

ResultBundle run_experiment(const ExperimentConfig& input, const fs::path& out,
                            std::ostream* progress) {
  ExperimentConfig cfg = input;
  cfg.derive_seeds();
  cfg.validate();

  fs::create_directories(out);
  for (const char* f : {"train_steps.jsonl", "train_epochs.jsonl", "search_history.jsonl",
                        "front.csv", "cost.csv", "summary.json"})
    fs::remove(out / f);
  fs::remove_all(out / "plots");
  write_json(out / "config.json", to_json(cfg));

  Pipeline p{cfg, out, progress, json::object(), {}};
  p.summary["version"] = kBundleVersion;
  p.summary["kind"] = to_string(cfg.kind);
  p.summary["seed"] = cfg.seed;
  p.summary["space"] = cfg.space.preset;
  p.summary["stages_planned"] = p.planned();
  p.summary["stages_done"] = json::array();
  p.summary["complete"] = false;

  try {
    switch (cfg.kind) {
      case ExperimentKind::cost: p.run_cost(); break;
      case ExperimentKind::finetune: p.run_finetune(); break;
      case ExperimentKind::search: p.run_search(); break;
      case ExperimentKind::ablation_teacher: p.run_teacher_ablation(); break;
      case ExperimentKind::ablation_space: p.run_space_ablation(); break;
      case ExperimentKind::ablation_epochs: p.run_epoch_ablation(); break;
    }
  } catch (const std::exception& e) {
    p.summary["error"] = e.what();
    write_json(out / "summary.json", p.summary);
    throw;
  }
  p.summary["complete"] = true;
  write_json(out / "summary.json", p.summary);
  emit_plot_data(out);
  return {out, p.summary, true};
}

// ---------------------------------------------------------------------------
// Plot data

std::vector<fs::path> emit_plot_data(const fs::path& dir) {
  if (!fs::exists(dir / "summary.json"))
    throw std::runtime_error("incomplete bundle " + dir.string() + ": missing summary.json");
  const json summary = load_summary(dir / "summary.json");
  std::vector<std::string> missing;
  const auto done = summary.at("stages_done").get<std::vector<std::string>>();
  for (const auto& s : summary.at("stages_planned").get<std::vector<std::string>>())
    if (std::find(done.begin(), done.end(), s) == done.end()) missing.push_back(s);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw std::runtime_error("incomplete bundle " + dir.string() + ": missing stages: " + list);
  }

  std::vector<fs::path> written;
  const auto epochs = read_jsonl(dir / "train_epochs.jsonl");
  if (!epochs.empty()) {
    const fs::path path = dir / "plots" / "epochs.csv";
    auto out = open_out(path);
    out << "arm,phase,epoch,mean_loss,supernet_accuracy,probe_accuracy,teacher_steps\n";
    for (const auto& e : epochs)
      out << fmt::format("{},{},{},{},{},{},{}\n", e.at("arm").get<std::string>(),
                         e.at("phase").get<std::string>(), e.at("epoch").get<std::size_t>(),
                         format_number(e.at("mean_loss").get<double>()),
                         format_number(e.at("supernet_accuracy").get<double>()),
                         format_number(e.at("probe_accuracy").get<double>()),
                         e.at("teacher_steps").get<std::size_t>());
    written.push_back(path);
  }

  const auto history = read_jsonl(dir / "search_history.jsonl");
  if (!history.empty()) {
    const fs::path hv_path = dir / "plots" / "hypervolume.csv";
    auto hv = open_out(hv_path);
    hv << "space,algorithm,run,seed,evaluation,hypervolume\n";
    // Per run: (space, algorithm, run) in first-seen order.
    std::vector<std::tuple<std::string, std::string, std::size_t>> order;
    std::map<std::tuple<std::string, std::string, std::size_t>, std::vector<Candidate>> runs;
    std::map<std::tuple<std::string, std::string, std::size_t>, std::uint64_t> seeds;
    for (const auto& h : history) {
      const auto key = std::make_tuple(h.at("space").get<std::string>(),
                                       h.at("algorithm").get<std::string>(),
                                       h.at("run").get<std::size_t>());
      if (!runs.contains(key)) order.push_back(key);
      seeds[key] = h.at("seed").get<std::uint64_t>();
      Candidate c;
      c.encoding.genes.clear();
      for (const auto& g : split(h.at("encoding").get<std::string>(), '-'))
        c.encoding.genes.push_back(static_cast<std::uint32_t>(std::stoul(g)));
      c.config = {h.at("depth").get<std::size_t>(),
                  h.at("heads").get<std::vector<std::size_t>>(),
                  h.at("ffn").get<std::vector<std::size_t>>()};
      c.accuracy = h.at("accuracy").get<double>();
      c.macs = h.at("macs").get<std::uint64_t>();
      c.index = h.at("index").get<std::size_t>();
      runs[key].push_back(std::move(c));
      hv << fmt::format("{},{},{},{},{},{}\n", std::get<0>(key), std::get<1>(key),
                        std::get<2>(key), seeds[key], h.at("index").get<std::size_t>() + 1,
                        format_number(h.at("hypervolume").get<double>()));
    }
    written.push_back(hv_path);

    const fs::path fr_path = dir / "plots" / "fronts.csv";
    auto fr = open_out(fr_path);
    fr << "space,algorithm,run,seed,encoding,depth,heads,ffn,accuracy,macs\n";
    for (const auto& key : order)
      for (const auto& c : pareto_front(runs[key]))
        fr << fmt::format("{},{},{},{},{},{},{},{},{},{}\n", std::get<0>(key),
                          std::get<1>(key), std::get<2>(key), seeds[key],
                          c.encoding.to_string(), c.config.depth, join(c.config.heads),
                          join(c.config.ffn), format_number(c.accuracy), c.macs);
    written.push_back(fr_path);

    if (summary.at("kind") == "ablation-space") {
      const fs::path sp_path = dir / "plots" / "space_fronts.csv";
      auto sp = open_out(sp_path);
      sp << "space,encoding,depth,heads,ffn,accuracy,macs,on_front\n";
      std::vector<std::string> names;
      std::map<std::string, std::vector<Candidate>> per_space;
      for (const auto& key : order) {
        const auto& name = std::get<0>(key);
        if (!per_space.contains(name)) names.push_back(name);
        auto& pool = per_space[name];
        for (const auto& c : runs[key]) {
          const bool dup = std::any_of(pool.begin(), pool.end(), [&](const Candidate& o) {
            return o.encoding == c.encoding;
          });
          if (!dup) pool.push_back(c);
        }
      }
      for (const auto& name : names) {
        auto& pool = per_space[name];
        std::stable_sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) {
          return a.macs < b.macs;
        });
        std::set<ArchEncoding> front;
        for (const auto& c : pareto_front(pool)) front.insert(c.encoding);
        for (const auto& c : pool)
          sp << fmt::format("{},{},{},{},{},{},{},{}\n", name, c.encoding.to_string(),
                            c.config.depth, join(c.config.heads), join(c.config.ffn),
                            format_number(c.accuracy), c.macs,
                            front.contains(c.encoding) ? 1 : 0);
      }
      written.push_back(sp_path);
    }
  }
  return written;
}

}  // namespace instatune
