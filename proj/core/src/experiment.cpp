#include "bugloc/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bugloc/error.hpp"
#include "bugloc/hash.hpp"
#include "bugloc/rng.hpp"

namespace bugloc {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read " + path);
  std::ostringstream out;
  out << f.rdbuf();
  return out.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw Error("cannot write " + tmp.string());
    f << bytes;
    if (!f) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

template <typename Fn>
void for_each_json_line(const std::string& bytes, const std::string& where,
                        Fn&& fn) {
  std::istringstream in(bytes);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      fn(json::parse(line));
    } catch (const json::exception& e) {
      throw ValidationError(where + " line " + std::to_string(line_no) + ": " +
                            e.what());
    }
  }
}

// ---------------------------------------------------------------- JSON forms

json bug_to_json(const BugRecord& bug) {
  return json{{"project", bug.project_id},
              {"bug_id", bug.bug_id},
              {"title", bug.title},
              {"description", bug.description},
              {"created_at", bug.created_at},
              {"status",
               bug.status == BugRecord::Status::fixed ? "fixed" : "other"}};
}

BugRecord bug_from_json(const json& j) {
  BugRecord bug;
  bug.project_id = j.at("project").get<std::string>();
  bug.bug_id = j.at("bug_id").get<std::string>();
  bug.title = j.at("title").get<std::string>();
  bug.description = j.at("description").get<std::string>();
  bug.created_at = j.at("created_at").get<std::int64_t>();
  bug.status = j.at("status").get<std::string>() == "fixed"
                   ? BugRecord::Status::fixed
                   : BugRecord::Status::other;
  return bug;
}

json commit_to_json(const CommitMeta& commit) {
  json files = json::array();
  for (const ChangedFile& f : commit.changed_files) {
    json jf{{"path", f.path}};
    jf["pre"] = f.pre_content ? json(*f.pre_content) : json();
    jf["post"] = f.post_content ? json(*f.post_content) : json();
    files.push_back(std::move(jf));
  }
  return json{{"sha", commit.commit_id},
              {"message", commit.message},
              {"timestamp", commit.timestamp},
              {"files", files}};
}

CommitMeta commit_from_json(const json& j) {
  CommitMeta commit;
  commit.commit_id = j.at("sha").get<std::string>();
  commit.message = j.at("message").get<std::string>();
  commit.timestamp = j.at("timestamp").get<std::int64_t>();
  for (const json& jf : j.at("files")) {
    ChangedFile f;
    f.path = jf.at("path").get<std::string>();
    if (!jf.at("pre").is_null()) f.pre_content = jf.at("pre").get<std::string>();
    if (!jf.at("post").is_null())
      f.post_content = jf.at("post").get<std::string>();
    commit.changed_files.push_back(std::move(f));
  }
  return commit;
}

json link_to_json(const FixLink& link) {
  return json{{"bug", bug_to_json(link.bug)},
              {"commit", commit_to_json(link.commit)},
              {"span", {link.matched_span.first, link.matched_span.second}},
              {"attachment_verified", link.attachment_verified}};
}

FixLink link_from_json(const json& j) {
  FixLink link;
  link.bug = bug_from_json(j.at("bug"));
  link.commit = commit_from_json(j.at("commit"));
  link.matched_span = {j.at("span").at(0).get<std::size_t>(),
                       j.at("span").at(1).get<std::size_t>()};
  link.attachment_verified = j.at("attachment_verified").get<bool>();
  return link;
}

/// One test bug with its candidate pool, as stored in build's eval artifact.
struct EvalInstance {
  BugRecord bug;
  std::vector<std::pair<std::string, std::string>> candidates;
  std::set<std::string> relevant;
};

json instance_to_json(const EvalInstance& inst) {
  json candidates = json::array();
  for (const auto& [path, content] : inst.candidates)
    candidates.push_back(json::array({path, content}));
  return json{{"bug", bug_to_json(inst.bug)},
              {"candidates", candidates},
              {"relevant", inst.relevant}};
}

EvalInstance instance_from_json(const json& j) {
  EvalInstance inst;
  inst.bug = bug_from_json(j.at("bug"));
  for (const json& c : j.at("candidates"))
    inst.candidates.emplace_back(c.at(0).get<std::string>(),
                                 c.at(1).get<std::string>());
  for (const json& r : j.at("relevant")) inst.relevant.insert(r.get<std::string>());
  return inst;
}

// ------------------------------------------------------------- manifest JSON

void expect_keys(const json& j, const std::string& where,
                 std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* key : allowed) known = known || it.key() == key;
    if (!known)
      throw ValidationError("manifest: unknown key \"" + it.key() + "\" in " +
                            where);
  }
}

std::string kind_name(IssueKind kind) {
  return kind == IssueKind::jira ? "jira" : "github";
}

IssueKind kind_from_name(const std::string& name) {
  if (name == "jira") return IssueKind::jira;
  if (name == "github") return IssueKind::github;
  throw ValidationError("manifest: issue_kind must be \"jira\" or \"github\"");
}

std::string attention_name(EncoderConfig::Attention a) {
  return a == EncoderConfig::Attention::full ? "full" : "lsh";
}

EncoderConfig::Attention attention_from_name(const std::string& name) {
  if (name == "full") return EncoderConfig::Attention::full;
  if (name == "lsh") return EncoderConfig::Attention::lsh;
  throw ValidationError("manifest: attention must be \"full\" or \"lsh\"");
}

json manifest_to_json(const ExperimentManifest& m) {
  const json encoder{{"attention", attention_name(m.encoder.attention_kind)},
                     {"num_layers", m.encoder.num_layers},
                     {"num_heads", m.encoder.num_heads},
                     {"hidden_dim", m.encoder.hidden_dim},
                     {"ffn_dim", m.encoder.ffn_dim},
                     {"max_len", m.encoder.max_len},
                     {"lsh_num_hashes", m.encoder.lsh_num_hashes},
                     {"lsh_bucket_size", m.encoder.lsh_bucket_size}};
  json stages;
  stages["mine"] = {{"issues", m.mine.issues_path},
                    {"issue_kind", kind_name(m.mine.issue_kind)},
                    {"commits", m.mine.commits_path}};
  stages["build"] = {{"negatives_per_positive", m.build.negatives_per_positive},
                     {"test_fraction", m.build.test_fraction},
                     {"candidate_pool", m.build.candidate_pool}};
  stages["vocab"] = {{"size", m.vocab.size}};
  stages["pretrain"] = {{"objective", objective_name(m.pretrain.objective)},
                        {"mask_rate", m.pretrain.mask_rate},
                        {"electra_disc_weight", m.pretrain.electra_disc_weight},
                        {"epochs", m.pretrain.epochs},
                        {"batch_size", m.pretrain.batch_size},
                        {"learning_rate", m.pretrain.learning_rate},
                        {"encoder", encoder}};
  stages["train_head"] = {{"conv_channels", m.train_head.head.conv_channels},
                          {"kernel_size", m.train_head.head.kernel_size},
                          {"hidden_units", m.train_head.head.hidden_units},
                          {"epochs", m.train_head.epochs},
                          {"batch_size", m.train_head.batch_size},
                          {"learning_rate", m.train_head.learning_rate}};
  return json{{"experiment_id", m.experiment_id},
              {"seed", m.seed},
              {"artifact_dir", m.artifact_dir},
              {"stages", stages}};
}

ExperimentManifest manifest_from_json(const json& j) {
  expect_keys(j, "manifest",
              {"experiment_id", "seed", "artifact_dir", "stages"});
  ExperimentManifest m;
  m.experiment_id = j.at("experiment_id").get<std::string>();
  if (m.experiment_id.empty() ||
      m.experiment_id.find_first_of("/\\") != std::string::npos)
    throw ValidationError(
        "manifest: experiment_id must be a non-empty name without path "
        "separators");
  m.artifact_dir = j.at("artifact_dir").get<std::string>();
  if (m.artifact_dir.empty())
    throw ValidationError("manifest: artifact_dir must be set");
  m.seed = j.value("seed", std::uint64_t{0});

  const json stages = j.value("stages", json::object());
  expect_keys(stages, "stages",
              {"mine", "build", "vocab", "pretrain", "train_head", "evaluate",
               "analyze"});
  if (stages.contains("mine")) {
    const json& s = stages.at("mine");
    expect_keys(s, "stages.mine", {"issues", "issue_kind", "commits"});
    m.mine.issues_path = s.value("issues", "");
    m.mine.issue_kind = kind_from_name(s.value("issue_kind", "jira"));
    m.mine.commits_path = s.value("commits", "");
  }
  if (stages.contains("build")) {
    const json& s = stages.at("build");
    expect_keys(s, "stages.build",
                {"negatives_per_positive", "test_fraction", "candidate_pool"});
    m.build.negatives_per_positive =
        s.value("negatives_per_positive", m.build.negatives_per_positive);
    m.build.test_fraction = s.value("test_fraction", m.build.test_fraction);
    m.build.candidate_pool = s.value("candidate_pool", m.build.candidate_pool);
  }
  if (stages.contains("vocab")) {
    const json& s = stages.at("vocab");
    expect_keys(s, "stages.vocab", {"size"});
    m.vocab.size = s.value("size", m.vocab.size);
  }
  if (stages.contains("pretrain")) {
    const json& s = stages.at("pretrain");
    expect_keys(s, "stages.pretrain",
                {"objective", "mask_rate", "electra_disc_weight", "epochs",
                 "batch_size", "learning_rate", "encoder"});
    if (s.contains("objective"))
      m.pretrain.objective =
          objective_from_name(s.at("objective").get<std::string>());
    m.pretrain.mask_rate = s.value("mask_rate", m.pretrain.mask_rate);
    m.pretrain.electra_disc_weight =
        s.value("electra_disc_weight", m.pretrain.electra_disc_weight);
    m.pretrain.epochs = s.value("epochs", m.pretrain.epochs);
    m.pretrain.batch_size = s.value("batch_size", m.pretrain.batch_size);
    m.pretrain.learning_rate =
        s.value("learning_rate", m.pretrain.learning_rate);
    if (s.contains("encoder")) {
      const json& e = s.at("encoder");
      expect_keys(e, "stages.pretrain.encoder",
                  {"attention", "num_layers", "num_heads", "hidden_dim",
                   "ffn_dim", "max_len", "lsh_num_hashes", "lsh_bucket_size"});
      if (e.contains("attention"))
        m.encoder.attention_kind =
            attention_from_name(e.at("attention").get<std::string>());
      m.encoder.num_layers = e.value("num_layers", m.encoder.num_layers);
      m.encoder.num_heads = e.value("num_heads", m.encoder.num_heads);
      m.encoder.hidden_dim = e.value("hidden_dim", m.encoder.hidden_dim);
      m.encoder.ffn_dim = e.value("ffn_dim", m.encoder.ffn_dim);
      m.encoder.max_len = e.value("max_len", m.encoder.max_len);
      m.encoder.lsh_num_hashes =
          e.value("lsh_num_hashes", m.encoder.lsh_num_hashes);
      m.encoder.lsh_bucket_size =
          e.value("lsh_bucket_size", m.encoder.lsh_bucket_size);
    }
  }
  if (stages.contains("train_head")) {
    const json& s = stages.at("train_head");
    expect_keys(s, "stages.train_head",
                {"conv_channels", "kernel_size", "hidden_units", "epochs",
                 "batch_size", "learning_rate"});
    if (s.contains("conv_channels"))
      m.train_head.head.conv_channels =
          s.at("conv_channels").get<std::vector<int>>();
    m.train_head.head.kernel_size =
        s.value("kernel_size", m.train_head.head.kernel_size);
    m.train_head.head.hidden_units =
        s.value("hidden_units", m.train_head.head.hidden_units);
    m.train_head.epochs = s.value("epochs", m.train_head.epochs);
    m.train_head.batch_size = s.value("batch_size", m.train_head.batch_size);
    m.train_head.learning_rate =
        s.value("learning_rate", m.train_head.learning_rate);
  }
  if (stages.contains("evaluate"))
    expect_keys(stages.at("evaluate"), "stages.evaluate", {});
  if (stages.contains("analyze"))
    expect_keys(stages.at("analyze"), "stages.analyze", {});
  return m;
}

// --------------------------------------------------------------- run records

struct OutputRef {
  std::string file;
  std::string hash;
  bool operator==(const OutputRef&) const = default;
};

struct RunRecord {
  json config;
  std::map<std::string, std::string> inputs;
  std::map<std::string, OutputRef> outputs;
  double wall_seconds = 0.0;
};

json record_to_json(const RunRecord& rec) {
  json outputs = json::object();
  for (const auto& [logical, ref] : rec.outputs)
    outputs[logical] = json{{"file", ref.file}, {"hash", ref.hash}};
  return json{{"config", rec.config},
              {"inputs", rec.inputs},
              {"outputs", outputs},
              {"wall_seconds", rec.wall_seconds}};
}

/// A missing or unparseable record reads as "never completed".
std::optional<RunRecord> load_record(const fs::path& path) {
  if (!fs::exists(path)) return std::nullopt;
  try {
    const json j = json::parse(read_file(path.string()));
    RunRecord rec;
    rec.config = j.at("config");
    rec.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    for (const auto& [logical, ref] : j.at("outputs").items())
      rec.outputs[logical] = {ref.at("file").get<std::string>(),
                              ref.at("hash").get<std::string>()};
    rec.wall_seconds = j.at("wall_seconds").get<double>();
    return rec;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

fs::path stage_directory(const ExperimentManifest& m, const std::string& stage) {
  return fs::path(m.artifact_dir) / m.experiment_id / stage;
}

/// Look an artifact up in its producer's run record and verify its bytes.
std::pair<fs::path, std::string> locate_artifact(const ExperimentManifest& m,
                                                 const std::string& producer,
                                                 const std::string& logical,
                                                 const std::string& who) {
  const fs::path dir = stage_directory(m, producer);
  const auto rec = load_record(dir / "run.json");
  if (!rec)
    throw ValidationError(who + ": missing input artifact " + producer + "/" +
                          logical + " under " + dir.string() + "; run stage " +
                          producer + " first");
  const auto it = rec->outputs.find(logical);
  if (it == rec->outputs.end())
    throw ValidationError(who + ": stage " + producer +
                          " records no artifact named " + logical);
  const fs::path path = dir / it->second.file;
  if (!fs::exists(path))
    throw ValidationError(who + ": missing input artifact " + path.string());
  const std::string hash = hash_file(path.string());
  if (hash != it->second.hash)
    throw ValidationError(who + ": stale artifact " + path.string() +
                          " (content hash " + hash + " != recorded " +
                          it->second.hash + ")");
  return {path, hash};
}

// ------------------------------------------------------------ stage plumbing

struct StageContext {
  const ExperimentManifest& m;
  std::string name;
  fs::path dir;
  json config = json::object();
  std::map<std::string, std::string> inputs;       // "<stage>/<name>" -> hash
  std::map<std::string, std::string> input_paths;  // same keys -> path
  std::map<std::string, OutputRef> outputs;
};

std::string resolve_input(StageContext& ctx, const std::string& producer,
                          const std::string& logical) {
  const auto [path, hash] =
      locate_artifact(ctx.m, producer, logical, "stage " + ctx.name);
  const std::string key = producer + "/" + logical;
  ctx.inputs[key] = hash;
  ctx.input_paths[key] = path.string();
  return path.string();
}

/// External files named by the manifest (the mine stage's exports).
void declare_file_input(StageContext& ctx, const std::string& logical,
                        const std::string& path) {
  if (path.empty())
    throw ValidationError("stage " + ctx.name + ": " + logical +
                          " path not set in manifest");
  if (!fs::exists(path))
    throw ValidationError("stage " + ctx.name + ": missing input artifact " +
                          path);
  const std::string key = "file/" + logical;
  ctx.inputs[key] = hash_file(path);
  ctx.input_paths[key] = path;
}

void emit(StageContext& ctx, const std::string& logical, const std::string& ext,
          const std::function<void(const std::string&)>& writer) {
  fs::create_directories(ctx.dir);
  const fs::path tmp = ctx.dir / ("tmp-" + logical);
  writer(tmp.string());
  const std::string hash = hash_file(tmp.string());
  const std::string file = hash + "." + ext;
  fs::rename(tmp, ctx.dir / file);  // atomic completion
  ctx.outputs[logical] = {file, hash};
}

bool can_skip(const StageContext& ctx) {
  const auto rec = load_record(ctx.dir / "run.json");
  if (!rec || rec->config != ctx.config || rec->inputs != ctx.inputs)
    return false;
  for (const auto& [logical, ref] : rec->outputs) {
    const fs::path path = ctx.dir / ref.file;
    if (!fs::exists(path) || hash_file(path.string()) != ref.hash) return false;
  }
  return true;
}

void commit_stage(const StageContext& ctx, double wall_seconds) {
  // drop files the new record no longer references, so every byte in the
  // stage directory stays reachable from run.json
  std::set<std::string> keep{"run.json"};
  for (const auto& [logical, ref] : ctx.outputs) keep.insert(ref.file);
  for (const auto& entry : fs::directory_iterator(ctx.dir))
    if (!keep.count(entry.path().filename().string())) fs::remove(entry.path());
  const RunRecord rec{ctx.config, ctx.inputs, ctx.outputs, wall_seconds};
  write_file_atomic(ctx.dir / "run.json", record_to_json(rec).dump(2) + "\n");
}

// ------------------------------------------------------------- stage bodies

std::vector<FixLink> load_links(const std::string& bytes,
                                const std::string& where) {
  std::vector<FixLink> links;
  for_each_json_line(bytes, where,
                     [&](const json& j) { links.push_back(link_from_json(j)); });
  return links;
}

std::vector<EvalInstance> load_instances(const std::string& bytes,
                                         const std::string& where) {
  std::vector<EvalInstance> instances;
  for_each_json_line(bytes, where, [&](const json& j) {
    instances.push_back(instance_from_json(j));
  });
  return instances;
}

std::vector<std::string> positive_pair_texts(const DatasetManifest& ds) {
  std::vector<std::string> texts;
  for (const auto& rec : ds.records) {
    if (rec.label != 1) continue;
    texts.push_back(bug_query_text(rec.bug));
    texts.push_back(rec.file_content);
  }
  return texts;
}

void prepare_mine(StageContext& ctx) {
  const auto& mc = ctx.m.mine;
  ctx.config = json{{"issues", mc.issues_path},
                    {"issue_kind", kind_name(mc.issue_kind)},
                    {"commits", mc.commits_path}};
  declare_file_input(ctx, "issues", mc.issues_path);
  declare_file_input(ctx, "commits", mc.commits_path);
}

void execute_mine(StageContext& ctx) {
  const auto& mc = ctx.m.mine;
  const std::vector<BugRecord> bugs =
      parse_issue_export(read_file(mc.issues_path), mc.issue_kind);
  const std::vector<CommitMeta> commits =
      parse_commit_export(read_file(mc.commits_path));
  std::vector<FixLink> links;
  for (const BugRecord& bug : bugs) {
    std::vector<FixLink> found = link_bug_to_commits(bug, commits);
    links.insert(links.end(), std::make_move_iterator(found.begin()),
                 std::make_move_iterator(found.end()));
  }
  links = filter_links(std::move(links));

  // the project-volume filter counts distinct linked bugs
  std::map<std::string, std::set<std::string>> seen;
  std::map<std::string, std::vector<BugRecord>> per_project;
  for (const FixLink& link : links)
    if (seen[link.bug.project_id].insert(link.bug.bug_id).second)
      per_project[link.bug.project_id].push_back(link.bug);
  const auto kept = filter_projects(std::move(per_project));
  std::erase_if(links, [&](const FixLink& link) {
    return kept.count(link.bug.project_id) == 0;
  });
  if (links.empty())
    throw ValidationError("stage mine: no fix links survive filtering");

  emit(ctx, "links", "jsonl", [&](const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path);
    for (const FixLink& link : links) f << link_to_json(link).dump() << '\n';
  });
}

void prepare_build(StageContext& ctx) {
  const auto& bc = ctx.m.build;
  ctx.config = json{{"negatives_per_positive", bc.negatives_per_positive},
                    {"test_fraction", bc.test_fraction},
                    {"candidate_pool", bc.candidate_pool},
                    {"seed", derive_seed(ctx.m.seed, "build")}};
  resolve_input(ctx, "mine", "links");
}

void execute_build(StageContext& ctx) {
  const auto& bc = ctx.m.build;
  if (bc.candidate_pool < 1)
    throw ValidationError("stage build: candidate_pool must be >= 1");
  const std::uint64_t build_seed = derive_seed(ctx.m.seed, "build");
  const std::vector<FixLink> links = load_links(
      read_file(ctx.input_paths.at("mine/links")), "stage build: links");

  // Desk-scale candidate universe: per project, the union of every file
  // seen in any fixing commit, preferring pre-fix content. First-seen
  // content wins when a path recurs.
  std::map<std::string, std::map<std::string, std::string>> universe;
  for (const FixLink& link : links)
    for (const ChangedFile& f : link.commit.changed_files) {
      const std::string* content = nullptr;
      if (f.pre_content && !f.pre_content->empty())
        content = &*f.pre_content;
      else if (f.post_content && !f.post_content->empty())
        content = &*f.post_content;
      if (content) universe[link.bug.project_id].emplace(f.path, *content);
    }

  std::map<std::string, std::vector<std::pair<std::string, std::string>>>
      by_commit;
  for (const FixLink& link : links) {
    auto& pool = by_commit[link.commit.commit_id];
    if (pool.empty()) {
      const auto& u = universe[link.bug.project_id];
      pool.assign(u.begin(), u.end());
    }
  }

  BuildResult built =
      build_examples(links, by_commit, bc.negatives_per_positive, build_seed);
  if (built.warning_count > 0)
    std::fprintf(stderr,
                 "stage build: %d link(s) offered fewer candidate negatives "
                 "than requested\n",
                 built.warning_count);

  auto [train, test] = split_dataset(built.examples, bc.test_fraction);
  train.name = ctx.m.experiment_id + "-train";
  test.name = ctx.m.experiment_id + "-test";
  train.seed = build_seed;
  test.seed = build_seed;
  emit(ctx, "train", "manifest",
       [&](const std::string& path) { save_manifest(train, path); });
  emit(ctx, "test", "manifest",
       [&](const std::string& path) { save_manifest(test, path); });

  // evaluation pools: every relevant file plus seeded fill-up candidates
  struct PerBug {
    BugRecord bug;
    std::set<std::string> relevant;
  };
  std::map<std::pair<std::string, std::string>, PerBug> by_bug;
  for (const auto& rec : test.records) {
    PerBug& pb = by_bug[{rec.bug.project_id, rec.bug.bug_id}];
    pb.bug = rec.bug;
    if (rec.label == 1) pb.relevant.insert(rec.file_path);
  }
  std::vector<EvalInstance> instances;
  for (const auto& [key, pb] : by_bug) {
    if (pb.relevant.empty()) continue;  // no rankable ground truth
    const auto& u = universe.at(key.first);
    std::vector<std::string> others;
    for (const auto& [path, content] : u)
      if (!pb.relevant.count(path)) others.push_back(path);
    const std::size_t want =
        bc.candidate_pool > static_cast<int>(pb.relevant.size())
            ? static_cast<std::size_t>(bc.candidate_pool) - pb.relevant.size()
            : 0;
    Rng rng(derive_seed(derive_seed(ctx.m.seed, "candidate-pool"),
                        fnv1a64(key.first + "/" + key.second)));
    EvalInstance inst;
    inst.bug = pb.bug;
    inst.relevant = pb.relevant;
    for (const std::string& path : pb.relevant)
      inst.candidates.emplace_back(path, u.at(path));
    for (const std::size_t pick : rng.sample_without_replacement(
             others.size(), std::min(want, others.size())))
      inst.candidates.emplace_back(others[pick], u.at(others[pick]));
    std::sort(inst.candidates.begin(), inst.candidates.end());
    instances.push_back(std::move(inst));
  }
  if (instances.empty())
    throw ValidationError(
        "stage build: no evaluable test bug (no relevant files survive)");
  emit(ctx, "eval", "jsonl", [&](const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path);
    for (const EvalInstance& inst : instances)
      f << instance_to_json(inst).dump() << '\n';
  });
}

void prepare_vocab(StageContext& ctx) {
  ctx.config = json{{"size", ctx.m.vocab.size}};
  resolve_input(ctx, "build", "train");
}

void execute_vocab(StageContext& ctx) {
  const DatasetManifest ds = load_manifest(ctx.input_paths.at("build/train"));
  const std::vector<std::string> texts = positive_pair_texts(ds);
  if (texts.empty())
    throw ValidationError("stage vocab: training split has no positive pairs");
  const Vocabulary vocab = train_vocabulary(texts, ctx.m.vocab.size);
  emit(ctx, "vocab", "txt",
       [&](const std::string& path) { save_vocabulary(vocab, path); });
}

void prepare_pretrain(StageContext& ctx) {
  const auto& pc = ctx.m.pretrain;
  const json encoder{{"attention", attention_name(ctx.m.encoder.attention_kind)},
                     {"num_layers", ctx.m.encoder.num_layers},
                     {"num_heads", ctx.m.encoder.num_heads},
                     {"hidden_dim", ctx.m.encoder.hidden_dim},
                     {"ffn_dim", ctx.m.encoder.ffn_dim},
                     {"max_len", ctx.m.encoder.max_len},
                     {"lsh_num_hashes", ctx.m.encoder.lsh_num_hashes},
                     {"lsh_bucket_size", ctx.m.encoder.lsh_bucket_size},
                     {"seed", derive_seed(ctx.m.seed, "encoder")}};
  ctx.config = json{{"objective", objective_name(pc.objective)},
                    {"mask_rate", pc.mask_rate},
                    {"electra_disc_weight", pc.electra_disc_weight},
                    {"epochs", pc.epochs},
                    {"batch_size", pc.batch_size},
                    {"learning_rate", pc.learning_rate},
                    {"seed", derive_seed(ctx.m.seed, "pretrain")},
                    {"encoder", encoder}};
  resolve_input(ctx, "build", "train");
  resolve_input(ctx, "vocab", "vocab");
}

void execute_pretrain(StageContext& ctx) {
  const DatasetManifest ds = load_manifest(ctx.input_paths.at("build/train"));
  const Vocabulary vocab = load_vocabulary(ctx.input_paths.at("vocab/vocab"));
  PretrainConfig pc = ctx.m.pretrain;
  pc.seed = derive_seed(ctx.m.seed, "pretrain");
  EncoderConfig ec = ctx.m.encoder;
  ec.vocab_size = vocab.size();
  ec.seed = derive_seed(ctx.m.seed, "encoder");
  auto [encoder, log] = pretrain(pc, ec, ds, vocab);
  emit(ctx, "encoder", "ckpt",
       [&](const std::string& path) { save_checkpoint(encoder, path); });
  emit(ctx, "log", "csv",
       [&](const std::string& path) { save_training_log(log, path); });
}

void prepare_train_head(StageContext& ctx) {
  const auto& tc = ctx.m.train_head;
  ctx.config = json{{"conv_channels", tc.head.conv_channels},
                    {"kernel_size", tc.head.kernel_size},
                    {"hidden_units", tc.head.hidden_units},
                    {"head_seed", derive_seed(ctx.m.seed, "head")},
                    {"epochs", tc.epochs},
                    {"batch_size", tc.batch_size},
                    {"learning_rate", tc.learning_rate},
                    {"seed", derive_seed(ctx.m.seed, "train-head")}};
  resolve_input(ctx, "build", "train");
  resolve_input(ctx, "vocab", "vocab");
  resolve_input(ctx, "pretrain", "encoder");
}

void execute_train_head(StageContext& ctx) {
  const DatasetManifest ds = load_manifest(ctx.input_paths.at("build/train"));
  const Vocabulary vocab = load_vocabulary(ctx.input_paths.at("vocab/vocab"));
  const EncoderState encoder =
      load_checkpoint(ctx.input_paths.at("pretrain/encoder"));
  HeadConfig hc = ctx.m.train_head.head;
  hc.seed = derive_seed(ctx.m.seed, "head");
  auto [head, log] = train_head(
      encoder, hc, ds, vocab, ctx.m.train_head.epochs,
      ctx.m.train_head.batch_size, ctx.m.train_head.learning_rate,
      derive_seed(ctx.m.seed, "train-head"));
  emit(ctx, "head", "ckpt",
       [&](const std::string& path) { save_head_checkpoint(head, path); });
  emit(ctx, "log", "csv",
       [&](const std::string& path) { save_training_log(log, path); });
}

void prepare_evaluate(StageContext& ctx) {
  ctx.config = json::object();
  resolve_input(ctx, "build", "eval");
  resolve_input(ctx, "vocab", "vocab");
  resolve_input(ctx, "pretrain", "encoder");
  resolve_input(ctx, "train_head", "head");
}

void execute_evaluate(StageContext& ctx) {
  const std::vector<EvalInstance> instances = load_instances(
      read_file(ctx.input_paths.at("build/eval")), "stage evaluate: eval");
  const Vocabulary vocab = load_vocabulary(ctx.input_paths.at("vocab/vocab"));
  const EncoderState encoder =
      load_checkpoint(ctx.input_paths.at("pretrain/encoder"));
  const HeadState head =
      load_head_checkpoint(ctx.input_paths.at("train_head/head"));
  std::vector<RankedResult> results;
  results.reserve(instances.size());
  for (const EvalInstance& inst : instances)
    results.push_back(rank_files(encoder, head, inst.bug, inst.candidates,
                                 vocab, inst.relevant));
  const MetricReport report = metric_report(results);
  emit(ctx, "rankings", "jsonl",
       [&](const std::string& path) { save_ranked_results(results, path); });
  emit(ctx, "metrics", "json",
       [&](const std::string& path) { save_metric_report(report, path); });
  emit(ctx, "metrics_csv", "csv",
       [&](const std::string& path) { save_metric_report_csv(report, path); });
}

void prepare_analyze(StageContext& ctx) {
  ctx.config = json::object();
  resolve_input(ctx, "build", "train");
  resolve_input(ctx, "build", "eval");
  resolve_input(ctx, "evaluate", "rankings");
}

void execute_analyze(StageContext& ctx) {
  const DatasetManifest train_ds =
      load_manifest(ctx.input_paths.at("build/train"));
  const std::vector<EvalInstance> instances = load_instances(
      read_file(ctx.input_paths.at("build/eval")), "stage analyze: eval");
  const std::vector<RankedResult> rankings =
      load_ranked_results(ctx.input_paths.at("evaluate/rankings"));

  // each evaluation project against the pre-training corpus
  const TokenDistribution reference =
      token_frequency(positive_pair_texts(train_ds));
  std::map<std::string, std::vector<std::string>> project_texts;
  std::map<std::string, std::set<std::string>> seen_paths;
  for (const EvalInstance& inst : instances) {
    auto& texts = project_texts[inst.bug.project_id];
    texts.push_back(bug_query_text(inst.bug));
    for (const auto& [path, content] : inst.candidates)
      if (seen_paths[inst.bug.project_id].insert(path).second)
        texts.push_back(content);
  }
  std::map<std::string, TokenDistribution> project_dists;
  for (const auto& [project, texts] : project_texts)
    project_dists[project] = token_frequency(texts);
  const DivergenceReport divergence =
      divergence_report(project_dists, reference);
  emit(ctx, "divergence", "json", [&](const std::string& path) {
    save_divergence_report(divergence, path);
  });
  emit(ctx, "divergence_csv", "csv", [&](const std::string& path) {
    save_divergence_report_csv(divergence, path);
  });

  std::map<std::string, BugRecord> bugs;
  for (const EvalInstance& inst : instances)
    bugs[inst.bug.project_id + "/" + inst.bug.bug_id] = inst.bug;
  const DifficultyReport difficulty =
      difficulty_report({{ctx.m.experiment_id, rankings}}, bugs);
  emit(ctx, "difficulty", "json", [&](const std::string& path) {
    save_difficulty_report(difficulty, path);
  });
}

struct StageDef {
  std::string name;
  void (*prepare)(StageContext&);
  void (*execute)(StageContext&);
};

const std::vector<StageDef>& stage_defs() {
  static const std::vector<StageDef> defs{
      {"mine", prepare_mine, execute_mine},
      {"build", prepare_build, execute_build},
      {"vocab", prepare_vocab, execute_vocab},
      {"pretrain", prepare_pretrain, execute_pretrain},
      {"train_head", prepare_train_head, execute_train_head},
      {"evaluate", prepare_evaluate, execute_evaluate},
      {"analyze", prepare_analyze, execute_analyze}};
  return defs;
}

void validate_manifest(const ExperimentManifest& m) {
  if (m.experiment_id.empty() ||
      m.experiment_id.find_first_of("/\\") != std::string::npos)
    throw ValidationError(
        "manifest: experiment_id must be a non-empty name without path "
        "separators");
  if (m.artifact_dir.empty())
    throw ValidationError("manifest: artifact_dir must be set");
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const StageDef& def : stage_defs()) out.push_back(def.name);
    return out;
  }();
  return names;
}

ExperimentManifest load_experiment_manifest(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + path + ": " + e.what());
  }
  try {
    return manifest_from_json(j);
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + path + ": " + e.what());
  }
}

void save_experiment_manifest(const ExperimentManifest& manifest,
                              const std::string& path) {
  validate_manifest(manifest);
  write_file_atomic(path, manifest_to_json(manifest).dump(2) + "\n");
}

std::vector<StageOutcome> run_experiment(const ExperimentManifest& manifest,
                                         const std::string& only_stage) {
  validate_manifest(manifest);
  std::vector<const StageDef*> selected;
  for (const StageDef& def : stage_defs())
    if (only_stage.empty() || def.name == only_stage) selected.push_back(&def);
  if (selected.empty())
    throw ValidationError("unknown stage \"" + only_stage +
                          "\"; stages are mine, build, vocab, pretrain, "
                          "train_head, evaluate, analyze");

  std::vector<StageOutcome> outcomes;
  for (const StageDef* def : selected) {
    const auto start = std::chrono::steady_clock::now();
    StageContext ctx{manifest, def->name,
                     stage_directory(manifest, def->name)};
    def->prepare(ctx);
    StageOutcome outcome{def->name, false, 0.0};
    if (can_skip(ctx)) {
      outcome.skipped = true;
    } else {
      def->execute(ctx);
      const std::chrono::duration<double> elapsed =
          std::chrono::steady_clock::now() - start;
      commit_stage(ctx, elapsed.count());
    }
    outcome.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    outcomes.push_back(std::move(outcome));
  }
  return outcomes;
}

std::string artifact_path(const ExperimentManifest& manifest,
                          const std::string& stage,
                          const std::string& logical_name) {
  validate_manifest(manifest);
  return locate_artifact(manifest, stage, logical_name,
                         "experiment " + manifest.experiment_id)
      .first.string();
}

std::vector<SignificanceResult> compare_experiments(
    const std::vector<ExperimentManifest>& manifests, const std::string& metric,
    bool per_bug, double alpha) {
  if (manifests.size() < 2)
    throw ValidationError("compare: need at least 2 experiments");
  if (metric != "mrr" && metric != "map")
    throw ValidationError("compare: metric must be \"mrr\" or \"map\"");

  std::vector<std::string> labels;
  std::vector<std::vector<RankedResult>> rankings;
  for (const ExperimentManifest& m : manifests) {
    labels.push_back(m.experiment_id);
    rankings.push_back(
        load_ranked_results(artifact_path(m, "evaluate", "rankings")));
  }

  std::set<std::string> reference;
  for (const RankedResult& r : rankings.front()) reference.insert(r.bug_id);
  for (std::size_t i = 1; i < rankings.size(); ++i) {
    std::set<std::string> ids;
    for (const RankedResult& r : rankings[i]) ids.insert(r.bug_id);
    if (ids != reference)
      throw ValidationError("compare: experiments " + labels.front() + " and " +
                            labels[i] + " rank different test bugs");
  }

  std::vector<std::vector<double>> samples;
  for (const auto& results : rankings) {
    std::vector<double> values;
    if (per_bug) {
      for (const RankedResult& r : results)
        values.push_back(metric == "mrr" ? reciprocal_rank(r)
                                         : average_precision(r));
    } else {
      const MetricReport report = metric_report(results);
      for (const auto& [project, m] : report.per_project)
        values.push_back(metric == "mrr" ? m.mrr : m.map);
    }
    samples.push_back(std::move(values));
  }

  const int n = static_cast<int>(manifests.size());
  const int n_pairs = n * (n - 1) / 2;
  const double corrected = bonferroni(alpha, n_pairs);
  std::vector<SignificanceResult> table;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j)
      table.push_back(mann_whitney_u(samples[i], samples[j], labels[i],
                                     labels[j], corrected));
  return table;
}

}  // namespace bugloc
