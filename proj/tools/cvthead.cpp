#include <pthread.h>
#include <signal.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cvthead/errors.hpp"
#include "cvthead/head_model/head_model.hpp"
#include "cvthead/numerics/op_checks.hpp"
#include "cvthead/pipeline/pipeline.hpp"
#include "cvthead/service/avatar.hpp"
#include "cvthead/service/params_json.hpp"
#include "cvthead/service/png.hpp"
#include "cvthead/service/server.hpp"
#include "cvthead/training/training.hpp"

namespace fs = std::filesystem;
using namespace cvthead;
using nlohmann::json;

namespace {

constexpr int kUsageExit = 2;

const std::vector<std::string> kModes{"depth", "splat", "neural", "oracle"};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("cvthead");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* lvl = std::getenv("CVTHEAD_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));
}

std::string read_text(const fs::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(std::string(what) + " file '" + path.string() + "': cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

head_model::AvatarParams load_params(const fs::path& path, const head_model::HeadModel& model) {
  const auto text = read_text(path, "params");
  try {
    return service::parse_params(text, model);
  } catch (const Error& e) {
    throw FormatError("params file '" + path.string() + "': " + e.what());
  }
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

// Flags shared by the commands that build an Avatar.
struct AvatarFlags {
  std::string model;
  std::string weights;
  std::string source;
  std::uint64_t albedo_seed = 0;
  std::uint64_t weights_seed = 0;

  void add(CLI::App* cmd) {
    cmd->add_option("--model", model, "Head model (CVTH)")->required();
    cmd->add_option("--weights", weights, "Trained weights (CVTH); seeded init when absent");
    cmd->add_option("--source", source, "Source-frame params JSON (default: zero params)");
    cmd->add_option("--albedo-seed", albedo_seed, "Seed of the source-frame albedo");
    cmd->add_option("--weights-seed", weights_seed, "Seed of the default weights");
  }

  service::Avatar build() const {
    service::AvatarOptions opt;
    opt.albedo_seed = albedo_seed;
    opt.weights_seed = weights_seed;
    std::optional<fs::path> wpath;
    if (!weights.empty()) wpath = weights;
    if (source.empty()) return service::Avatar::load(model, wpath, opt);
    // The source params need the model for validation; load it once more.
    const auto m = head_model::load_model(model);
    opt.source = load_params(source, m);
    return service::Avatar::load(model, wpath, opt);
  }
};

int cmd_gen_model(std::uint64_t seed, std::size_t n, std::size_t coarse, std::size_t shape, std::size_t expr,
                  const fs::path& out) {
  const auto m = head_model::generate_synthetic_model(seed, n, coarse, shape, expr);
  save_model(m, out);
  spdlog::info("wrote {} ({} vertices, {} coarse)", out.string(), m.n_vertices(), m.n_coarse());
  return 0;
}

int cmd_render(const AvatarFlags& af, const std::string& params, const std::string& mode, int size,
               const fs::path& out) {
  const auto avatar = af.build();
  auto p = head_model::AvatarParams::zeros(avatar.model());
  if (!params.empty()) p = load_params(params, avatar.model());
  const auto m = service::parse_mode(mode);
  avatar.check_size(size, m);
  const auto r = avatar.render(p, m, size);
  service::write_file_atomic(out, service::encode_png(r.image));
  spdlog::info("wrote {} ({}x{}, {} mode, {:.1f} ms)", out.string(), size, size, mode, r.timing_ms.at("total"));
  return 0;
}

int cmd_animate(const AvatarFlags& af, const fs::path& seq, const std::string& mode, int size, const fs::path& dir) {
  const auto avatar = af.build();
  const auto m = service::parse_mode(mode);
  avatar.check_size(size, m);

  // Every line is validated before the first frame is written.
  std::ifstream in(seq);
  if (!in) throw FormatError("sequence file '" + seq.string() + "': cannot open");
  std::vector<head_model::AvatarParams> frames;
  std::string line;
  for (std::size_t ln = 1; std::getline(in, line); ++ln) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      frames.push_back(service::parse_params(line, avatar.model()));
    } catch (const Error& e) {
      throw FormatError(seq.string() + ": line " + std::to_string(ln) + ": " + e.what());
    }
  }

  fs::create_directories(dir);
  json manifest{{"mode", mode}, {"size", size}, {"frames", json::array()}};
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto r = avatar.render(frames[i], m, size);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%06zu.png", i);
    service::write_file_atomic(dir / name, service::encode_png(r.image));
    manifest["frames"].push_back({{"file", name}, {"timing_ms", r.timing_ms}});
  }
  const auto text = manifest.dump(2);
  service::write_file_atomic(dir / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  spdlog::info("wrote {} frames to {}", frames.size(), dir.string());
  return 0;
}

struct TrainFlags {
  std::string model;
  std::uint64_t model_seed = 0;
  std::size_t steps = 2000;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 0;
  std::size_t pairs = 8;
  int size = 64;
  std::size_t batch = 1;
  std::string out = "weights.cvth";
  std::string curve = "loss.csv";
  std::size_t log_every = 100;
};

int cmd_train_toy(const TrainFlags& f) {
  const auto model =
      f.model.empty() ? head_model::generate_synthetic_model(f.model_seed) : head_model::load_model(f.model);
  training::DatasetConfig dc;
  dc.pairs = f.pairs;
  dc.size = f.size;
  dc.seed = f.data_seed;
  const auto data = training::make_dataset(model, dc);

  training::TrainConfig tc;
  tc.steps = f.steps;
  tc.lr = f.lr;
  tc.seed = f.seed;
  tc.batch = f.batch;
  tc.pipeline.transformer.n_coarse = model.n_coarse();

  const auto t0 = std::chrono::steady_clock::now();
  const auto result = training::train_toy(model, data, tc, [&](const training::LossRow& r) {
    if (f.log_every && (r.step % f.log_every == 0 || r.step + 1 == f.steps)) {
      spdlog::info("step {:5d}  loss {:.5f}  l1 {:.5f}  dice {:.5f}", r.step, r.total, r.l1, r.dice);
    }
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  pipeline::save_weights(result.weights, tc.pipeline, f.out);
  training::write_loss_csv(f.curve, result.curve);
  const auto ev = training::evaluate(model, result.weights, tc.pipeline, data);
  print_json({{"steps", f.steps},
              {"seconds", secs},
              {"weights", f.out},
              {"curve", f.curve},
              {"train_l1", ev.l1},
              {"train_psnr", ev.psnr},
              {"train_ssim", ev.ssim},
              {"train_dice", ev.dice}});
  return 0;
}

int cmd_gradcheck(const std::string& op, std::size_t seeds, double rel_tol) {
  auto cases = numerics::primitive_grad_checks();
  for (auto& c : training::pipeline_grad_checks()) cases.push_back(std::move(c));
  if (op == "list") {
    for (const auto& c : cases) std::cout << c.name << "\n";
    return 0;
  }
  numerics::GradCheckOptions opt;
  opt.rel_tol = rel_tol;
  json ops = json::array();
  bool all_pass = true;
  bool found = false;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& c : cases) {
    if (op != "all" && op != c.name) continue;
    found = true;
    double max_rel = 0.0, max_abs = 0.0;
    std::size_t coords = 0, kinks = 0;
    bool pass = true;
    std::string worst;
    for (std::size_t s = 0; s < seeds; ++s) {
      const auto r = c.run(s, opt);
      coords += r.coords_checked;
      kinks += r.kinks;
      if (r.max_rel_err >= max_rel) {
        max_rel = r.max_rel_err;
        worst = r.worst;
      }
      max_abs = std::max(max_abs, r.max_abs_err);
      pass = pass && r.pass;
    }
    all_pass = all_pass && pass;
    if (!pass) spdlog::error("{} failed: {}", c.name, worst);
    ops.push_back({{"op", c.name},
                   {"max_rel_err", max_rel},
                   {"max_abs_err", max_abs},
                   {"coords_checked", coords},
                   {"kinks", kinks},
                   {"seeds", seeds},
                   {"pass", pass}});
  }
  if (!found) throw UsageError("unknown op '" + op + "' (try --op list)");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  print_json({{"rel_tol", rel_tol}, {"pass", all_pass}, {"seconds", secs}, {"ops", ops}});
  return all_pass ? 0 : 1;
}

int cmd_serve(const AvatarFlags& af, service::ServiceConfig cfg) {
  cfg.validate();
  // Signals are taken synchronously by this thread; server threads inherit the mask.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  auto avatar = std::make_shared<const service::Avatar>(af.build());
  service::Server server(avatar, cfg);
  server.start();
  int sig = 0;
  sigwait(&set, &sig);
  spdlog::info("signal {}, shutting down", sig);
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"cvthead: head avatar rendering tools"};
  app.require_subcommand(1);

  std::uint64_t gm_seed = 0;
  std::size_t gm_n = 5023, gm_coarse = 314, gm_shape = 20, gm_expr = 10;
  std::string gm_out = "model.cvth";
  auto* gen = app.add_subcommand("gen-model", "Write a synthetic head model");
  gen->add_option("--seed", gm_seed, "Generator seed");
  gen->add_option("--vertices", gm_n, "Vertex count");
  gen->add_option("--coarse", gm_coarse, "Coarse vertex count");
  gen->add_option("--shape-dims", gm_shape, "Shape coefficients");
  gen->add_option("--expr-dims", gm_expr, "Expression coefficients");
  gen->add_option("--out", gm_out, "Output file");

  AvatarFlags r_av;
  std::string r_params, r_mode = "depth", r_out = "frame.png";
  int r_size = 256;
  auto* render = app.add_subcommand("render", "Render one frame to PNG");
  r_av.add(render);
  render->add_option("--params", r_params, "Driving params JSON (default: zero params)");
  render->add_option("--mode", r_mode, "depth, splat, neural or oracle")->check(CLI::IsMember(kModes));
  render->add_option("--size", r_size, "Frame width and height")->check(CLI::PositiveNumber);
  render->add_option("--out", r_out, "Output PNG");

  AvatarFlags a_av;
  std::string a_seq, a_mode = "depth", a_dir = "frames";
  int a_size = 256;
  auto* animate = app.add_subcommand("animate", "Render a JSONL params sequence");
  a_av.add(animate);
  animate->add_option("--params", a_seq, "JSONL, one params object per line")->required();
  animate->add_option("--mode", a_mode, "depth, splat, neural or oracle")->check(CLI::IsMember(kModes));
  animate->add_option("--size", a_size, "Frame width and height")->check(CLI::PositiveNumber);
  animate->add_option("--out-dir", a_dir, "Output directory");

  TrainFlags tf;
  auto* train = app.add_subcommand("train-toy", "Overfit the toy pipeline on synthetic pairs");
  train->add_option("--model", tf.model, "Head model (default: synthetic, --model-seed)");
  train->add_option("--model-seed", tf.model_seed, "Synthetic model seed");
  train->add_option("--steps", tf.steps, "Adam steps");
  train->add_option("--lr", tf.lr, "Learning rate");
  train->add_option("--seed", tf.seed, "Weight init and shuffle seed");
  train->add_option("--data-seed", tf.data_seed, "Dataset seed");
  train->add_option("--pairs", tf.pairs, "Source/driving pairs");
  train->add_option("--size", tf.size, "Frame size");
  train->add_option("--batch", tf.batch, "Pairs per step (0 = all)");
  train->add_option("--out", tf.out, "Weights output");
  train->add_option("--curve", tf.curve, "Loss curve CSV");
  train->add_option("--log-every", tf.log_every, "Log interval in steps (0 = quiet)");

  std::string g_op = "all";
  std::size_t g_seeds = 10;
  double g_tol = 1e-3;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad->add_option("--op", g_op, "Op name, 'all' or 'list'");
  grad->add_option("--seeds", g_seeds, "Seeded cases per op");
  grad->add_option("--rel-tol", g_tol, "Relative tolerance");

  AvatarFlags b_av;
  service::BenchOptions bo;
  auto* bench = app.add_subcommand("bench", "Per-stage timings as JSON");
  b_av.add(bench);
  bench->add_option("--iters", bo.iters, "Frames")->check(CLI::PositiveNumber);
  bench->add_option("--size", bo.size, "Frame size")->check(CLI::PositiveNumber);

  AvatarFlags s_av;
  service::ServiceConfig sc;
  std::string s_mode = "depth";
  auto* serve = app.add_subcommand("serve", "HTTP and WebSocket render service");
  s_av.add(serve);
  serve->add_option("--host", sc.host, "Listen address");
  serve->add_option("--port", sc.port, "Listen port")->check(CLI::Range(1, 65535));
  serve->add_option("--frame-size", sc.frame_size, "Default frame size");
  serve->add_option("--max-frame-size", sc.max_frame_size, "Largest accepted frame size");
  serve->add_option("--mode", s_mode, "Default render mode")->check(CLI::IsMember(kModes));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageExit;
  }

  try {
    if (*gen) return cmd_gen_model(gm_seed, gm_n, gm_coarse, gm_shape, gm_expr, gm_out);
    if (*render) return cmd_render(r_av, r_params, r_mode, r_size, r_out);
    if (*animate) return cmd_animate(a_av, a_seq, a_mode, a_size, a_dir);
    if (*train) return cmd_train_toy(tf);
    if (*grad) return cmd_gradcheck(g_op, g_seeds, g_tol);
    if (*bench) {
      print_json(service::bench(b_av.build(), bo));
      return 0;
    }
    if (*serve) {
      sc.default_mode = service::parse_mode(s_mode);
      return cmd_serve(s_av, sc);
    }
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kUsageExit;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
