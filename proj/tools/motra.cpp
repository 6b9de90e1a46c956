#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "motra/config.hpp"
#include "motra/evalkit.hpp"
#include "motra/gradsuite.hpp"
#include "motra/image_io.hpp"

namespace fs = std::filesystem;
using namespace motra;

namespace {

LogFn jsonl_logger(std::ofstream& out) {
  return [&out](const nlohmann::json& line) {
    out << line.dump() << "\n";
    out.flush();
    std::cout << line.dump() << std::endl;
  };
}

void note_threads(int threads) {
  if (threads != 1)
    std::cerr << "note: data-parallel execution is not available in this build; "
                 "running single-threaded\n";
}

int cmd_synth(const std::string& config, const std::string& out, bool force) {
  RunConfig cfg = load_run_config(config);
  world::generate_dataset(cfg.world, out, force);
  world::Dataset ds(out);
  std::cout << "dataset written to " << out << ": " << ds.person_ids("train").size()
            << " train + " << ds.person_ids("test").size() << " test persons, "
            << cfg.world.frames_per_person << " frames each\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out,
              std::string log_path, const std::string& stage, const std::string& resume,
              int threads) {
  note_threads(threads);
  RunConfig cfg = load_run_config(config);
  world::Dataset ds(data);
  if (log_path.empty()) log_path = out + ".log.jsonl";
  std::ofstream log_file(log_path, std::ios::app);
  if (!log_file) throw std::invalid_argument("train: cannot open log file " + log_path);
  LogFn log = jsonl_logger(log_file);

  Checkpoint ck;
  bool have_ck = false;
  if (!resume.empty()) {
    ck = load_checkpoint(resume);
    have_ck = true;
    std::cout << "resumed from " << resume << " at epoch " << ck.epoch << "\n";
  }

  auto save_partial = [&]() {
    if (!have_ck) return;
    try {
      save_checkpoint(out, ck);
      std::cerr << "partial checkpoint retained at " << out << "\n";
    } catch (const std::exception& e) {
      std::cerr << "failed to retain partial checkpoint: " << e.what() << "\n";
    }
  };

  try {
    if (!have_ck) {
      if (stage == "mv")
        throw std::invalid_argument("train: --stage mv requires --resume <init checkpoint>");
      ck = stage_init(ds, cfg.train, log);
      have_ck = true;
    }
    if (stage != "init") stage_multivideo(ds, ck, cfg.train, log);
  } catch (const std::exception&) {
    save_partial();
    throw;
  }
  save_checkpoint(out, ck);
  std::cout << "checkpoint written to " << out << " (epoch " << ck.epoch << ")\n";
  return 0;
}

int cmd_finetune(const std::string& config, const std::string& data, const std::string& ckpt,
                 std::string person, const std::string& out, int threads) {
  note_threads(threads);
  RunConfig cfg = load_run_config(config);
  world::Dataset ds(data);
  Checkpoint base = load_checkpoint(ckpt);
  if (person.empty()) {
    auto test = ds.person_ids("test");
    if (test.empty()) throw std::invalid_argument("finetune: dataset has no test persons");
    person = test.front();
  }
  std::ofstream log_file(out + ".log.jsonl", std::ios::app);
  LogFn log = jsonl_logger(log_file);
  Checkpoint personalized = finetune_fewshot(base, ds, person, cfg.finetune, log);
  save_checkpoint(out, personalized);
  std::cout << "personalized checkpoint for " << person << " written to " << out << "\n";
  return 0;
}

int cmd_transfer(const std::string& ckpt, const std::string& data, const std::string& person,
                 int frames, const std::string& out, bool force) {
  Checkpoint ck = load_checkpoint(ckpt);
  world::Dataset ds(data);
  if (fs::exists(out) && !fs::is_empty(out) && !force)
    throw std::invalid_argument("transfer: output dir " + out + " not empty (use --force)");
  fs::create_directories(out);

  int total = ds.frames_of(person);
  int count = frames < 0 ? total : std::min(frames, total);
  if (count == 0) {
    std::cerr << "warning: 0-frame pose sequence, nothing to transfer\n";
    return 0;
  }

  const Bundle& f0 = ds.frame(person, 0);
  auto ps = f0.get("stickman").shape;
  Tensor<float> poses({count, ps[0], ps[1], ps[2]});
  int64_t per = static_cast<int64_t>(ps[0]) * ps[1] * ps[2];
  for (int i = 0; i < count; ++i) {
    const auto& sm = ds.frame(person, i).get("stickman");
    std::copy(sm.data.begin(), sm.data.end(), poses.data.begin() + i * per);
  }

  TransferOut res = transfer(ck, poses);
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04d", i);
    Tensor<float> img = evaldetail::slice_frame(res.images, i);
    write_png((fs::path(out) / (std::string(name) + ".png")).string(), img);
    Bundle b;
    b.put("image", img);
    b.put("scores", evaldetail::slice_frame(res.scores, i));
    b.put("coords", evaldetail::slice_frame(res.coords, i));
    b.meta = {{"driving_person", person}, {"frame", i}, {"config", ck.config}};
    b.save((fs::path(out) / (std::string(name) + ".pgt")).string(), kMagicData);
  }
  std::cout << count << " frames written to " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& person,
             const std::string& mode, int frames, const std::string& out) {
  Checkpoint ck = load_checkpoint(ckpt);
  world::Dataset ds(data);
  int total = ds.frames_of(person);
  std::vector<int> ids;
  for (int i = 0; i < std::min(frames, total); ++i) ids.push_back(i);

  EvalReport rep;
  if (mode == "reconstruction")
    rep = eval_reconstruction(ck, ds, person, ids);
  else if (mode == "transfer")
    rep = eval_transfer(ck, ds, person, ids);
  else
    throw std::invalid_argument("eval: mode must be reconstruction or transfer");

  nlohmann::json j = rep.to_json();
  j["mode"] = mode;
  j["person"] = person;
  std::ofstream f(out);
  if (!f) throw std::invalid_argument("eval: cannot open " + out);
  f << j.dump(2) << "\n";
  std::cout << "report written to " << out << "\n";
  std::cout << j["ssim"]["mean"].dump() << " ssim, " << j["masked_l1"]["mean"].dump()
            << " masked L1, " << j["pose_error"]["mean"].dump() << " px pose error\n";
  return 0;
}

int cmd_gradcheck() {
  auto items = run_grad_suite();
  bool all = true;
  for (const auto& it : items) {
    std::printf("%-24s max_rel=%.3e tol=%.0e %s\n", it.name.c_str(), it.rep.max_rel_error,
                it.tol, it.pass() ? "ok" : "FAIL");
    all = all && it.pass();
  }
  if (!all) throw std::invalid_argument("gradcheck: failures above tolerance");
  std::cout << items.size() << " gradient checks passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"few-shot human motion transfer on a synthetic articulated-figure world"};
  app.require_subcommand(1);

  std::string config, data, out, ckpt, person, resume;
  std::string stage = "all", mode = "reconstruction", log_path;
  int threads = 1, frames = -1, eval_frames = 20;
  bool force = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--config", config, "run config JSON")->required();
  synth->add_option("--out", out, "dataset directory")->required();
  synth->add_flag("--force", force, "regenerate over an existing dataset");

  auto* train = app.add_subcommand("train", "run the training stages");
  train->add_option("--config", config, "run config JSON")->required();
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--out", out, "checkpoint output path")->required();
  train->add_option("--log", log_path, "JSON-lines training log (default <out>.log.jsonl)");
  train->add_option("--stage", stage, "all|init|mv")
      ->check(CLI::IsMember({"all", "init", "mv"}));
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--threads", threads, "worker threads (1 = deterministic reference)");

  auto* ft = app.add_subcommand("finetune", "personalize for an unseen person");
  ft->add_option("--config", config, "run config JSON")->required();
  ft->add_option("--data", data, "dataset directory")->required();
  ft->add_option("--checkpoint", ckpt, "base checkpoint")->required();
  ft->add_option("--person", person, "person id (default: first test person)");
  ft->add_option("--out", out, "personalized checkpoint output path")->required();
  ft->add_option("--threads", threads, "worker threads (1 = deterministic reference)");

  auto* tr = app.add_subcommand("transfer", "drive a personalized model with poses");
  tr->add_option("--checkpoint", ckpt, "personalized checkpoint")->required();
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--person", person, "driving person id")->required();
  tr->add_option("--frames", frames, "number of frames (default: all)");
  tr->add_option("--out", out, "output directory")->required();
  tr->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* ev = app.add_subcommand("eval", "score a personalized model");
  ev->add_option("--checkpoint", ckpt, "personalized checkpoint")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--person", person, "person id")->required();
  ev->add_option("--mode", mode, "reconstruction|transfer")
      ->check(CLI::IsMember({"reconstruction", "transfer"}));
  ev->add_option("--frames", eval_frames, "frames to score");
  ev->add_option("--out", out, "report JSON path")->required();

  app.add_subcommand("gradcheck", "finite-difference check of all analytic gradients");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (app.got_subcommand("synth")) return cmd_synth(config, out, force);
    if (app.got_subcommand("train"))
      return cmd_train(config, data, out, log_path, stage, resume, threads);
    if (app.got_subcommand("finetune"))
      return cmd_finetune(config, data, ckpt, person, out, threads);
    if (app.got_subcommand("transfer"))
      return cmd_transfer(ckpt, data, person, frames, out, force);
    if (app.got_subcommand("eval")) return cmd_eval(ckpt, data, person, mode, eval_frames, out);
    if (app.got_subcommand("gradcheck")) return cmd_gradcheck();
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
