#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "mupad/checkpoint.hpp"
#include "mupad/config.hpp"
#include "mupad/dataset.hpp"
#include "mupad/evaluate.hpp"
#include "mupad/io.hpp"
#include "mupad/pipelines.hpp"
#include "mupad/train.hpp"

using namespace mupad;
namespace fs = std::filesystem;

namespace {

std::vector<std::size_t> parse_layers(const std::string& s, std::size_t depth) {
  if (s.empty()) return default_inject_layers(depth);
  if (s == "none") return {};
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    const unsigned long v = std::stoul(item, &pos);
    if (pos != item.size()) throw Error("bad layer index '" + item + "'");
    out.push_back(v);
  }
  return out;
}

Tensor read_rna(const fs::path& path) {
  std::istringstream in(io::read_file(path));
  std::vector<double> v;
  double x;
  while (in >> x) v.push_back(x);
  if (!in.eof()) throw Error("RNA file " + path.string() + " has a non-numeric entry");
  if (v.size() != kPathwayCount) {
    throw Error("RNA file must hold " + std::to_string(kPathwayCount) + " pathway scores, found " +
                std::to_string(v.size()));
  }
  return Tensor({kPathwayCount}, std::move(v));
}

struct TrainArgs {
  fs::path data, out, config, resume;
  std::optional<std::size_t> steps, batch, checkpoint_every, group;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::string arm, variant, task;
};

int cmd_gen_data(std::size_t n, std::uint64_t seed, const fs::path& out, double frozen_fraction) {
  const auto m = gen_dataset(n, seed, out, frozen_fraction);
  std::printf("wrote %zu samples to %s\n", m.entries.size(), out.c_str());
  return 0;
}

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig() : RunConfig::load(a.config);
  apply_seed_override(cfg);
  if (a.seed) cfg.seed = *a.seed;
  if (a.steps) cfg.steps = *a.steps;
  if (a.batch) cfg.batch = *a.batch;
  if (a.lr) cfg.lr = *a.lr;
  if (a.checkpoint_every) cfg.checkpoint_every = *a.checkpoint_every;
  if (!a.arm.empty()) cfg.arm = parse_align_arm(a.arm);
  if (!a.variant.empty()) cfg.model.variant = parse_variant(a.variant);
  if (!a.task.empty()) cfg.task = parse_task(a.task);
  if (a.group) cfg.stain_group = *a.group;
  if (cfg.task == Task::stain && cfg.model.struct_channels == 0) cfg.model.struct_channels = cfg.model.latent_channels;
  cfg.validate();

  // A resumed run keeps the checkpoint's config; only the step target moves.
  std::optional<Checkpoint> ckpt;
  if (!a.resume.empty()) {
    ckpt = Checkpoint::load(a.resume);
    const std::size_t target = cfg.steps;
    cfg = ckpt->config;
    cfg.steps = target;
  }
  const auto samples = load_dataset(a.data);
  const auto data = TrainingSet::build(samples, cfg);
  auto trainer = ckpt ? std::make_unique<Trainer>(*ckpt, data) : std::make_unique<Trainer>(cfg, data);
  const auto log = train_run(*trainer, a.out, cfg.steps);
  if (!log.empty()) {
    std::printf("trained to step %llu, last loss %.6g (patch %.6g)\n",
                static_cast<unsigned long long>(log.back().step), log.back().total, log.back().patch);
  }
  return 0;
}

int cmd_sample(const fs::path& ckpt_path, const fs::path& out, std::size_t n, std::uint64_t seed,
               std::optional<std::size_t> steps, const std::string& mode, const fs::path& cond_image,
               const std::string& cond_text, const fs::path& cond_rna, bool raw) {
  const auto ckpt = Checkpoint::load(ckpt_path);
  if (ckpt.config.model.struct_channels > 0) throw Error("this checkpoint is a staining model; use `stain`");
  const auto model = load_model(ckpt, !raw);
  const Conditioner conditioner;
  ConditionSet c;
  if (!cond_image.empty()) c = merge(c, conditioner.from_image(io::read_ppm(cond_image)));
  if (!cond_text.empty()) c = merge(c, conditioner.from_text(cond_text));
  if (!cond_rna.empty()) c = merge(c, conditioner.from_rna(read_rna(cond_rna)));
  RunConfig cfg = ckpt.config;
  if (steps) cfg.sample_steps = *steps;
  if (!mode.empty()) {
    if (mode != "ode" && mode != "sde") throw Error("--mode must be ode or sde");
    cfg.sample_mode = mode == "ode" ? flow::SamplerMode::ode : flow::SamplerMode::sde;
  }
  const auto images = sample_images(model, ConditionBatch(n, c), cfg.sampler(seed), cfg.guidance());
  save_images(out, images);
  cfg.save(out / "config.ini");
  std::printf("wrote %zu samples (%zu active condition slots) to %s\n", images.size(), c.active_count(),
              out.c_str());
  return 0;
}

int cmd_translate(const fs::path& ckpt_path, const fs::path& src, const std::string& src_prompt,
                  const std::string& tgt_prompt, std::size_t steps, const std::string& inject, const fs::path& out,
                  const fs::path& recon) {
  const auto ckpt = Checkpoint::load(ckpt_path);
  const auto model = load_model(ckpt);
  TranslationRequest req;
  req.source = io::read_ppm(src);
  req.source_prompt = src_prompt;
  req.target_prompt = tgt_prompt;
  req.steps = steps;
  req.inject_layers = parse_layers(inject, model.config().depth);
  const auto res = translate(model, Conditioner(), req);
  io::write_ppm(out, res.image);
  if (!recon.empty()) io::write_ppm(recon, res.reconstruction);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_stain(const fs::path& ckpt_path, const fs::path& he, std::size_t group, const fs::path& out,
              std::optional<std::size_t> steps, std::uint64_t seed) {
  const auto ckpt = Checkpoint::load(ckpt_path);
  if (ckpt.config.task != Task::stain) throw Error("checkpoint was not trained for staining");
  if (ckpt.config.stain_group != group) {
    throw Error("checkpoint was trained for group " + std::to_string(ckpt.config.stain_group) + ", not " +
                std::to_string(group));
  }
  RunConfig cfg = ckpt.config;
  if (steps) cfg.sample_steps = *steps;
  StainRequest req;
  req.structure = io::read_ppm(he);
  req.group = group;
  const Tensor img = stain(load_model(ckpt), Conditioner(), req, cfg.sampler(seed), cfg.guidance());
  io::write_ppm(out, img);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_eval(const fs::path& real, const fs::path& fake, std::size_t iterations, std::uint64_t seed,
             const fs::path& out, const fs::path& loss_log, const fs::path& plot) {
  const auto rows = evaluate_images(load_images(real), load_images(fake), iterations, seed);
  const auto text = report_tsv(rows);
  if (out.empty()) {
    std::cout << text;
  } else {
    io::write_file(out, text);
  }
  if (!plot.empty()) {
    if (loss_log.empty()) throw Error("--plot needs --loss-log");
    io::write_ppm(plot, loss_plot(LossLog::read(loss_log)));
  }
  return 0;
}

int cmd_ablate(const fs::path& data, const fs::path& out, std::size_t steps, std::size_t seeds, std::size_t eval_n,
               std::size_t sample_steps, const fs::path& config) {
  RunConfig base = config.empty() ? RunConfig() : RunConfig::load(config);
  apply_seed_override(base);
  base.steps = steps;
  base.task = Task::generate;
  base.model.struct_channels = 0;
  const auto samples = load_dataset(data);
  const auto ts = TrainingSet::build(samples, base);
  AblationSetup setup;
  setup.base = base;
  setup.train = &ts;
  setup.sample_steps = sample_steps;
  for (std::size_t i = 0; i < std::min(eval_n, samples.size()); ++i) setup.references.push_back(samples[i].image);

  std::vector<AblationCell> cells;
  for (auto variant : {CrossAttentionVariant::dca, CrossAttentionVariant::shared}) {
    for (auto arm : {AlignArm::mupad, AlignArm::repa, AlignArm::naive}) {
      for (std::size_t k = 0; k < seeds; ++k) {
        const std::uint64_t seed = base.seed + k;
        const auto dir = out / (variant_name(variant) + "_" + align_arm_name(arm) + "_seed" + std::to_string(seed));
        cells.push_back(run_ablation_cell(setup, variant, arm, seed, dir));
        std::fprintf(stderr, "%s/%s seed %llu: fid %.6g similarity %.6g\n", variant_name(variant).c_str(),
                     align_arm_name(arm).c_str(), static_cast<unsigned long long>(seed), cells.back().fid,
                     cells.back().similarity);
      }
    }
  }
  fs::create_directories(out);
  io::write_file(out / "ablation.tsv", ablation_tsv(cells));
  const auto summary = ablation_summary(cells);
  io::write_file(out / "summary.tsv", summary);
  base.save(out / "config.ini");
  std::cout << summary;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal latent diffusion on synthetic histology"};
  app.require_subcommand(1);

  std::size_t n = 0;
  std::uint64_t seed = 0;
  fs::path out;
  double frozen_fraction = 0.5;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--n", n, "Sample count")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Dataset seed");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--frozen-fraction", frozen_fraction, "Share of frozen-domain samples")->check(CLI::Range(0.0, 1.0));

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a denoiser");
  train->add_option("--data", ta.data, "Dataset directory")->required();
  train->add_option("--out", ta.out, "Run directory")->required();
  train->add_option("--config", ta.config, "INI config file");
  train->add_option("--resume", ta.resume, "Checkpoint to continue from");
  train->add_option("--steps", ta.steps);
  train->add_option("--batch", ta.batch);
  train->add_option("--lr", ta.lr);
  train->add_option("--seed", ta.seed);
  train->add_option("--checkpoint-every", ta.checkpoint_every);
  train->add_option("--arm", ta.arm, "mupad, repa or naive");
  train->add_option("--variant", ta.variant, "dca or shared");
  train->add_option("--task", ta.task, "generate or stain");
  train->add_option("--group", ta.group, "Marker channel group for --task stain");

  fs::path ckpt, cond_image, cond_rna, recon;
  std::string cond_text, mode;
  std::optional<std::size_t> steps_opt;
  bool raw = false;
  std::size_t count = 8;
  auto* sample = app.add_subcommand("sample", "Generate images from any subset of conditions");
  sample->add_option("--ckpt", ckpt)->required();
  sample->add_option("--out", out, "Output directory")->required();
  sample->add_option("--n", count, "Number of images")->check(CLI::PositiveNumber);
  sample->add_option("--seed", seed);
  sample->add_option("--steps", steps_opt);
  sample->add_option("--mode", mode, "ode or sde");
  sample->add_option("--cond-image", cond_image, "Reference image (PPM)");
  sample->add_option("--cond-text", cond_text, "Caption");
  sample->add_option("--cond-rna", cond_rna, "File of 331 pathway scores");
  sample->add_flag("--raw", raw, "Use raw instead of EMA weights");

  fs::path src;
  std::string src_prompt, tgt_prompt, inject;
  std::size_t tsteps = 50;
  auto* trans = app.add_subcommand("translate", "Prompt-to-prompt domain translation");
  trans->add_option("--ckpt", ckpt)->required();
  trans->add_option("--src", src, "Source image (PPM)")->required();
  trans->add_option("--src-prompt", src_prompt)->required();
  trans->add_option("--tgt-prompt", tgt_prompt)->required();
  trans->add_option("--steps", tsteps)->check(CLI::PositiveNumber);
  trans->add_option("--inject", inject, "Comma-separated layers, or none (default: upper half)");
  trans->add_option("--out", out)->required();
  trans->add_option("--recon", recon, "Also write the source-prompt reconstruction");

  fs::path he;
  std::size_t group = 0;
  auto* st = app.add_subcommand("stain", "Virtual staining of one marker group");
  st->add_option("--ckpt", ckpt)->required();
  st->add_option("--he", he, "Structure image (PPM)")->required();
  st->add_option("--group", group)->required();
  st->add_option("--out", out)->required();
  st->add_option("--steps", steps_opt);
  st->add_option("--seed", seed);

  fs::path real, fake, loss_log, plot;
  std::size_t iterations = 25;
  auto* ev = app.add_subcommand("eval", "Compare two image sets");
  ev->add_option("--real", real)->required();
  ev->add_option("--fake", fake)->required();
  ev->add_option("--bootstrap", iterations, "Bootstrap iterations");
  ev->add_option("--seed", seed);
  ev->add_option("--out", out, "Report file (default: stdout)");
  ev->add_option("--loss-log", loss_log);
  ev->add_option("--plot", plot, "Loss-curve PPM");

  fs::path data, config;
  std::size_t asteps = 3000, seeds = 3, eval_n = 128, sample_steps = 25;
  auto* ab = app.add_subcommand("ablate", "Cross-attention x alignment ablation matrix");
  ab->add_option("--data", data)->required();
  ab->add_option("--out", out)->required();
  ab->add_option("--steps", asteps)->check(CLI::PositiveNumber);
  ab->add_option("--seeds", seeds)->check(CLI::PositiveNumber);
  ab->add_option("--eval-n", eval_n, "Reference images for FID")->check(CLI::Range(2, 1 << 20));
  ab->add_option("--sample-steps", sample_steps)->check(CLI::PositiveNumber);
  ab->add_option("--config", config);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* failed = &app;
    for (const auto* sub : app.get_subcommands()) failed = sub;
    std::cerr << failed->help();
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  try {
    if (*gen) return cmd_gen_data(n, seed, out, frozen_fraction);
    if (*train) return cmd_train(ta);
    if (*sample) return cmd_sample(ckpt, out, count, seed, steps_opt, mode, cond_image, cond_text, cond_rna, raw);
    if (*trans) return cmd_translate(ckpt, src, src_prompt, tgt_prompt, tsteps, inject, out, recon);
    if (*st) return cmd_stain(ckpt, he, group, out, steps_opt, seed);
    if (*ev) return cmd_eval(real, fake, iterations, seed, out, loss_log, plot);
    if (*ab) return cmd_ablate(data, out, asteps, seeds, eval_n, sample_steps, config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
