#include "mupad/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <sstream>

#include "mupad/io.hpp"

namespace mupad {

namespace pt = boost::property_tree;

std::string task_name(Task t) { return t == Task::generate ? "generate" : "stain"; }

Task parse_task(const std::string& s) {
  if (s == "generate") return Task::generate;
  if (s == "stain") return Task::stain;
  throw Error("unknown task '" + s + "' (expected generate or stain)");
}

std::string variant_name(CrossAttentionVariant v) { return v == CrossAttentionVariant::dca ? "dca" : "shared"; }

CrossAttentionVariant parse_variant(const std::string& s) {
  if (s == "dca") return CrossAttentionVariant::dca;
  if (s == "shared") return CrossAttentionVariant::shared;
  throw Error("unknown cross-attention variant '" + s + "' (expected dca or shared)");
}

std::size_t RunConfig::resolved_align_layer() const {
  return align_layer == static_cast<std::size_t>(-1) ? default_align_layer(model.depth) : align_layer;
}

flow::SamplerConfig RunConfig::sampler(std::uint64_t s) const {
  return {sample_steps, sample_mode, noise_scale, s};
}

flow::GuidanceSchedule RunConfig::guidance() const {
  return {guidance_start, guidance_end, flow::GuidanceSchedule::Shape::linear};
}

void RunConfig::validate() const {
  model.validate();
  if (resolved_align_layer() >= model.depth) throw Error("config: align_layer must be below model depth");
  if (batch == 0) throw Error("config: batch must be positive");
  if (!(lr > 0.0)) throw Error("config: lr must be positive");
  if (!(weight_decay >= 0.0)) throw Error("config: weight_decay must be nonnegative");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw Error("config: ema_decay must lie in (0,1)");
  if (!(dropout >= 0.0 && dropout <= 1.0)) throw Error("config: dropout must lie in [0,1]");
  if (weights.patch < 0.0 || weights.cls < 0.0 || weights.align < 0.0) throw Error("config: loss weights must be nonnegative");
  if (sample_steps == 0) throw Error("config: sample steps must be positive");
  if (task == Task::stain && model.struct_channels == 0) throw Error("config: stain task needs struct_channels > 0");
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T get(const pt::ptree& tree, const std::string& key, T fallback) {
  try {
    // get<T>(key, fallback) would also fall back on unparsable values.
    return tree.get_child_optional(key) ? tree.get<T>(key) : fallback;
  } catch (const pt::ptree_error& e) {
    throw Error("config: bad value for " + key + ": " + e.what());
  }
}

}  // namespace

std::string RunConfig::to_ini() const {
  std::ostringstream os;
  const ModelConfig& m = model;
  os << "[model]\n"
     << "depth=" << m.depth << "\ndim=" << m.dim << "\nheads=" << m.heads << "\npatch=" << m.patch
     << "\nlatent_channels=" << m.latent_channels << "\nlatent_height=" << m.latent_height
     << "\nlatent_width=" << m.latent_width << "\nstruct_channels=" << m.struct_channels
     << "\nimage_width=" << m.image_width << "\ntext_width=" << m.text_width << "\nrna_width=" << m.rna_width
     << "\ncls_width=" << m.cls_width << "\nvocab_size=" << m.vocab_size << "\nmax_text_len=" << m.max_text_len
     << "\nmlp_ratio=" << m.mlp_ratio << "\ntime_frequencies=" << m.time_frequencies
     << "\nvariant=" << variant_name(m.variant) << "\ncls_injection=" << (m.cls_injection ? "true" : "false")
     << "\nzero_init=" << (m.zero_init ? "true" : "false") << "\n\n";
  os << "[loss]\n"
     << "lambda_patch=" << fmt(weights.patch) << "\nlambda_cls=" << fmt(weights.cls)
     << "\nlambda_align=" << fmt(weights.align) << "\narm=" << align_arm_name(arm)
     << "\nalign_layer=" << resolved_align_layer() << "\n\n";
  os << "[train]\n"
     << "task=" << task_name(task) << "\nstain_group=" << stain_group << "\nsteps=" << steps << "\nbatch=" << batch
     << "\nlr=" << fmt(lr) << "\nweight_decay=" << fmt(weight_decay) << "\nema_decay=" << fmt(ema_decay)
     << "\ndropout=" << fmt(dropout) << "\nseed=" << seed << "\ncheckpoint_every=" << checkpoint_every << "\n\n";
  os << "[sample]\n"
     << "steps=" << sample_steps << "\nmode=" << (sample_mode == flow::SamplerMode::ode ? "ode" : "sde")
     << "\nnoise_scale=" << fmt(noise_scale) << "\nguidance_start=" << fmt(guidance_start)
     << "\nguidance_end=" << fmt(guidance_end) << "\n";
  return os.str();
}

RunConfig RunConfig::from_ini(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(std::string("config: ") + e.what());
  }
  static const std::map<std::string, std::vector<std::string>> known = {
      {"model",
       {"depth", "dim", "heads", "patch", "latent_channels", "latent_height", "latent_width", "struct_channels",
        "image_width", "text_width", "rna_width", "cls_width", "vocab_size", "max_text_len", "mlp_ratio",
        "time_frequencies", "variant", "cls_injection", "zero_init"}},
      {"loss", {"lambda_patch", "lambda_cls", "lambda_align", "arm", "align_layer"}},
      {"train",
       {"task", "stain_group", "steps", "batch", "lr", "weight_decay", "ema_decay", "dropout", "seed",
        "checkpoint_every"}},
      {"sample", {"steps", "mode", "noise_scale", "guidance_start", "guidance_end"}}};
  for (const auto& [section, body] : tree) {
    const auto it = known.find(section);
    if (it == known.end()) throw Error("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      if (std::find(it->second.begin(), it->second.end(), key) == it->second.end()) {
        throw Error("config: unknown key " + section + "." + key);
      }
    }
  }

  RunConfig c;
  ModelConfig& m = c.model;
  m.depth = get(tree, "model.depth", m.depth);
  m.dim = get(tree, "model.dim", m.dim);
  m.heads = get(tree, "model.heads", m.heads);
  m.patch = get(tree, "model.patch", m.patch);
  m.latent_channels = get(tree, "model.latent_channels", m.latent_channels);
  m.latent_height = get(tree, "model.latent_height", m.latent_height);
  m.latent_width = get(tree, "model.latent_width", m.latent_width);
  m.struct_channels = get(tree, "model.struct_channels", m.struct_channels);
  m.image_width = get(tree, "model.image_width", m.image_width);
  m.text_width = get(tree, "model.text_width", m.text_width);
  m.rna_width = get(tree, "model.rna_width", m.rna_width);
  m.cls_width = get(tree, "model.cls_width", m.cls_width);
  m.vocab_size = get(tree, "model.vocab_size", m.vocab_size);
  m.max_text_len = get(tree, "model.max_text_len", m.max_text_len);
  m.mlp_ratio = get(tree, "model.mlp_ratio", m.mlp_ratio);
  m.time_frequencies = get(tree, "model.time_frequencies", m.time_frequencies);
  m.variant = parse_variant(get<std::string>(tree, "model.variant", variant_name(m.variant)));
  m.cls_injection = get(tree, "model.cls_injection", m.cls_injection);
  m.zero_init = get(tree, "model.zero_init", m.zero_init);

  c.weights.patch = get(tree, "loss.lambda_patch", c.weights.patch);
  c.weights.cls = get(tree, "loss.lambda_cls", c.weights.cls);
  c.weights.align = get(tree, "loss.lambda_align", c.weights.align);
  c.arm = parse_align_arm(get<std::string>(tree, "loss.arm", align_arm_name(c.arm)));
  c.align_layer = get(tree, "loss.align_layer", c.align_layer);

  c.task = parse_task(get<std::string>(tree, "train.task", task_name(c.task)));
  c.stain_group = get(tree, "train.stain_group", c.stain_group);
  c.steps = get(tree, "train.steps", c.steps);
  c.batch = get(tree, "train.batch", c.batch);
  c.lr = get(tree, "train.lr", c.lr);
  c.weight_decay = get(tree, "train.weight_decay", c.weight_decay);
  c.ema_decay = get(tree, "train.ema_decay", c.ema_decay);
  c.dropout = get(tree, "train.dropout", c.dropout);
  c.seed = get(tree, "train.seed", c.seed);
  c.checkpoint_every = get(tree, "train.checkpoint_every", c.checkpoint_every);

  c.sample_steps = get(tree, "sample.steps", c.sample_steps);
  const auto mode = get<std::string>(tree, "sample.mode", "ode");
  if (mode != "ode" && mode != "sde") throw Error("config: sample.mode must be ode or sde");
  c.sample_mode = mode == "ode" ? flow::SamplerMode::ode : flow::SamplerMode::sde;
  c.noise_scale = get(tree, "sample.noise_scale", c.noise_scale);
  c.guidance_start = get(tree, "sample.guidance_start", c.guidance_start);
  c.guidance_end = get(tree, "sample.guidance_end", c.guidance_end);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return from_ini(io::read_file(path)); }

void RunConfig::save(const std::filesystem::path& path) const { io::write_file(path, to_ini()); }

bool apply_seed_override(RunConfig& cfg) {
  const char* env = std::getenv("MUPAD_SEED");
  if (!env || !*env) return false;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw Error(std::string("MUPAD_SEED is not an unsigned integer: ") + env);
  cfg.seed = v;
  return true;
}

}  // namespace mupad
