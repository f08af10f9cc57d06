#include "mupad/train.hpp"

#include <algorithm>
#include <cstdio>
#include <random>
#include <sstream>

#include "mupad/encoder.hpp"
#include "mupad/flow.hpp"
#include "mupad/imaging.hpp"
#include "mupad/io.hpp"
#include "mupad/optim.hpp"

namespace mupad {

namespace {

constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kAlignerStream = 2;
constexpr std::uint64_t kStepStream = 3;

AdamWConfig adamw_config(const RunConfig& cfg) {
  AdamWConfig h;
  h.lr = cfg.lr;
  h.weight_decay = cfg.weight_decay;
  return h;
}

std::size_t teacher_width() { return make_teacher_encoder().width(); }

}  // namespace

Tensor target_image(const synth::Sample& s, const RunConfig& cfg) {
  if (cfg.task == Task::generate) return s.image;
  const auto groups = group_channels(s.markers);
  if (cfg.stain_group >= groups.size()) {
    throw ShapeError("stain group " + std::to_string(cfg.stain_group) + " out of range (" +
                     std::to_string(groups.size()) + " groups)");
  }
  return groups[cfg.stain_group];
}

TrainingSet TrainingSet::build(const std::vector<synth::Sample>& samples, const RunConfig& cfg,
                               const Conditioner& conditioner) {
  if (samples.empty()) throw Error("training set is empty");
  cfg.validate();
  const StubEncoder teacher = make_teacher_encoder();
  TrainingSet ts;
  std::vector<Tensor> x0, zs, grids, cls;
  for (const auto& s : samples) {
    const Tensor target = target_image(s, cfg);
    x0.push_back(to_model_space(latent_encode(target)));
    grids.push_back(teacher.encode(target).tokens);
    cls.push_back(conditioner.cls_of(target));
    if (cfg.task == Task::stain) {
      zs.push_back(to_model_space(latent_encode(s.image)));
      ts.conditions.push_back(conditioner.from_image(s.image));
    } else {
      ts.conditions.push_back(conditioner.full(s));
    }
  }
  ts.x0 = stack(x0);
  const auto& mc = cfg.model;
  if (ts.x0.shape() != Shape{samples.size(), mc.latent_channels, mc.latent_height, mc.latent_width}) {
    throw ShapeError("training latents " + shape_str(ts.x0.shape()) + " do not match the model config");
  }
  if (!zs.empty()) {
    ts.z_struct = stack(zs);
    if (ts.z_struct.dim(1) != mc.struct_channels) throw ShapeError("structural latent channels do not match config");
  }
  ts.teacher = stack(grids);
  ts.cls_target = stack(cls);
  return ts;
}

// ---------------------------------------------------------------------------

LossLog::LossLog(const std::filesystem::path& path) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, std::ios::app);
  if (!out_) throw Error("cannot open loss log " + path.string());
  if (fresh) out_ << kHeader << '\n' << std::flush;
}

void LossLog::write(const StepLoss& s) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%llu\t%.17g\t%.17g\t%.17g\t%.17g\n", static_cast<unsigned long long>(s.step),
                s.total, s.patch, s.cls, s.align);
  out_ << buf << std::flush;
  if (!out_) throw Error("loss log write failed");
}

std::vector<StepLoss> LossLog::read(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != kHeader) throw io::FormatError("loss log: missing header");
  std::vector<StepLoss> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    StepLoss s;
    unsigned long long step = 0;
    if (std::sscanf(line.c_str(), "%llu\t%lf\t%lf\t%lf\t%lf", &step, &s.total, &s.patch, &s.cls, &s.align) != 5) {
      throw io::FormatError("loss log: malformed line '" + line + "'");
    }
    s.step = step;
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(RunConfig cfg, const TrainingSet& data)
    : cfg_(std::move(cfg)),
      data_(&data),
      model_(cfg_.model, derive_seed(cfg_.seed, kModelStream)),
      aligner_(cfg_.arm, cfg_.model, teacher_width(), derive_seed(cfg_.seed, kAlignerStream),
               cfg_.resolved_align_layer()) {
  cfg_.validate();
  init_state();
}

Trainer::Trainer(const Checkpoint& ckpt, const TrainingSet& data) : Trainer(ckpt.config, data) {
  restore(model_.params(), ckpt.model, "checkpoint model");
  restore(aligner_.params(), ckpt.aligner, "checkpoint aligner");
  if (ckpt.optimizer.m.size() != trainable_.size()) throw io::FormatError("checkpoint optimizer size mismatch");
  opt_ = ckpt.optimizer;
  ema_.decay = ckpt.ema.decay;
  for (std::size_t i = 0; i < ema_.shadow.size(); ++i) {
    if (ckpt.ema.shadow.at(i).shape() != ema_.shadow[i].shape()) throw io::FormatError("checkpoint EMA shape mismatch");
    std::copy(ckpt.ema.shadow[i].data().begin(), ckpt.ema.shadow[i].data().end(),
              ema_.shadow[i].mutable_data().begin());
  }
  step_ = ckpt.step;
}

void Trainer::init_state() {
  const auto& mc = cfg_.model;
  if (data_->x0.rank() != 4 || data_->x0.dim(1) != mc.latent_channels || data_->x0.dim(2) != mc.latent_height ||
      data_->x0.dim(3) != mc.latent_width) {
    throw ShapeError("training set does not match the model config");
  }
  if ((mc.struct_channels > 0) != data_->z_struct.defined()) {
    throw ShapeError("structural latents present iff the model has structural channels");
  }
  trainable_ = model_.params().tensors();
  for (const auto& t : aligner_.params().tensors()) trainable_.push_back(t);
  opt_ = AdamWState::for_params(adamw_config(cfg_), trainable_);
  const auto denoiser = model_.params().tensors();
  ema_ = EmaState::for_params(denoiser, cfg_.ema_decay);
}

StepLoss Trainer::step() {
  const TrainingSet& d = *data_;
  const std::size_t b = cfg_.batch;
  Rng rng(derive_seed(derive_seed(cfg_.seed, kStepStream), step_));

  std::uniform_int_distribution<std::size_t> pick(0, d.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::size_t> idx(b);
  for (auto& i : idx) i = pick(rng);
  std::vector<double> t(b);
  for (auto& x : t) x = unit(rng);
  const Tensor x0 = take(d.x0, idx);
  const Tensor eps = Tensor::randn(x0.shape(), rng);
  ConditionBatch cond;
  cond.reserve(b);
  for (std::size_t i : idx) cond.push_back(condition_dropout(d.conditions[i], cfg_.dropout, rng));

  const auto path = flow::interpolate(x0, eps, t);
  const Tensor cls_target = take(d.cls_target, idx);
  const Tensor teacher = take(d.teacher, idx);
  const Tensor teacher_rows = teacher.view({teacher.dim(0) * teacher.dim(1), teacher.dim(2)});

  ForwardOptions opts;
  opts.keep_features = aligner_.arm() != AlignArm::naive;
  if (d.z_struct.defined()) opts.z_struct = take(d.z_struct, idx);

  model_.params().zero_grad();
  aligner_.params().zero_grad();
  Tape tape;
  StepLoss rec;
  {
    TapeScope scope(tape);
    const auto out = model_.forward(path.x_t, t, cond, opts);
    const auto terms = total_loss(out, path.v_target, cls_target, teacher_rows, aligner_, cfg_.weights);
    rec.total = terms.total.item();
    rec.patch = terms.patch;
    rec.cls = terms.cls;
    rec.align = terms.align;
    tape.backward(terms.total);
  }
  adamw_step(opt_, trainable_);
  ++step_;
  const double s = static_cast<double>(step_);
  ema_.decay = std::min(cfg_.ema_decay, (1.0 + s) / (10.0 + s));
  const auto denoiser = model_.params().tensors();
  ema_update(ema_, denoiser);
  rec.step = step_;
  return rec;
}

DiffusionTransformer Trainer::ema_model() const {
  DiffusionTransformer m(cfg_.model, derive_seed(cfg_.seed, kModelStream));
  m.params().assign(ema_.shadow);
  return m;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = cfg_;
  c.step = step_;
  c.model = named_copy(model_.params());
  c.aligner = named_copy(aligner_.params());
  c.optimizer = opt_;
  c.ema.decay = ema_.decay;
  for (const auto& t : ema_.shadow) c.ema.shadow.push_back(t.clone());
  return c;
}

DiffusionTransformer load_model(const Checkpoint& ckpt, bool use_ema) {
  DiffusionTransformer m(ckpt.config.model, derive_seed(ckpt.config.seed, kModelStream));
  if (!use_ema) {
    restore(m.params(), ckpt.model, "checkpoint model");
    return m;
  }
  NamedTensors ema;
  for (std::size_t i = 0; i < ckpt.model.size(); ++i) ema.emplace_back(ckpt.model[i].first, ckpt.ema.shadow.at(i));
  restore(m.params(), ema, "checkpoint EMA");
  return m;
}

std::vector<StepLoss> train_run(Trainer& trainer, const std::filesystem::path& dir, std::uint64_t until) {
  std::filesystem::create_directories(dir);
  trainer.config().save(dir / "config.ini");
  LossLog log(dir / "loss.tsv");
  const std::size_t every = trainer.config().checkpoint_every;
  std::vector<StepLoss> out;
  while (trainer.steps_done() < until) {
    StepLoss s;
    try {
      s = trainer.step();
    } catch (const NumericError& e) {
      const auto path = dir / "last_good.ckpt";
      trainer.checkpoint().save(path);
      throw TrainingAborted(std::string("training aborted at step ") + std::to_string(trainer.steps_done() + 1) +
                                ": " + e.what(),
                            trainer.steps_done() + 1, path);
    }
    log.write(s);
    out.push_back(s);
    if (every > 0 && s.step % every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06llu.ckpt", static_cast<unsigned long long>(s.step));
      trainer.checkpoint().save(dir / name);
    }
  }
  trainer.checkpoint().save(dir / "final.ckpt");
  return out;
}

}  // namespace mupad
