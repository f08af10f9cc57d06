#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "mupad/checkpoint.hpp"
#include "mupad/config.hpp"
#include "mupad/dataset.hpp"
#include "mupad/io.hpp"
#include "mupad/train.hpp"

using namespace mupad;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mupad_train_" + name);
  fs::remove_all(p);
  return p;
}

RunConfig tiny(AlignArm arm = AlignArm::mupad) {
  RunConfig c;
  c.model.depth = 2;
  c.model.dim = 32;
  c.model.heads = 2;
  c.batch = 4;
  c.lr = 1e-3;
  c.seed = 17;
  c.arm = arm;
  return c;
}

const std::vector<synth::Sample>& samples() {
  static const auto s = generate_samples(12, 5);
  return s;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::string forward_digest(const DiffusionTransformer& m, const TrainingSet& ts) {
  const std::vector<std::size_t> idx{0, 1, 2};
  ConditionBatch cond(ts.conditions.begin(), ts.conditions.begin() + 3);
  const auto out = m.forward(take(ts.x0, idx), {0.2, 0.5, 0.9}, cond);
  return io::tensor_digest({out.v_patch, out.v_cls});
}

}  // namespace

TEST_CASE("config text round trip and validation") {
  RunConfig c = tiny(AlignArm::repa);
  c.model.variant = CrossAttentionVariant::shared;
  c.lr = 3.0e-4 / 7.0;
  c.task = Task::stain;
  c.model.struct_channels = 48;
  c.stain_group = 1;
  c.sample_mode = flow::SamplerMode::sde;
  const auto text = c.to_ini();
  const auto back = RunConfig::from_ini(text);
  CHECK(back.to_ini() == text);
  CHECK(back.lr == c.lr);
  CHECK(back.arm == AlignArm::repa);
  CHECK(back.model.variant == CrossAttentionVariant::shared);

  CHECK(RunConfig::from_ini("").to_ini() == RunConfig().to_ini());
  CHECK_THROWS_AS(RunConfig::from_ini("[train]\nlearning_rate=1\n"), Error);
  CHECK_THROWS_AS(RunConfig::from_ini("[extras]\nx=1\n"), Error);
  CHECK_THROWS_AS(RunConfig::from_ini("[train]\nlr=fast\n"), Error);
  CHECK_THROWS_AS(RunConfig::from_ini("[train]\ntask=stain\n"), Error);  // no structural channels
  CHECK_THROWS_AS(RunConfig::from_ini("[model]\nvariant=joint\n"), Error);

  RunConfig s;
  ::setenv("MUPAD_SEED", "991", 1);
  CHECK(apply_seed_override(s));
  CHECK(s.seed == 991);
  ::setenv("MUPAD_SEED", "12x", 1);
  CHECK_THROWS_AS(apply_seed_override(s), Error);
  ::unsetenv("MUPAD_SEED");
  CHECK_FALSE(apply_seed_override(s));
}

TEST_CASE("training sets for both tasks") {
  const auto gen = TrainingSet::build(samples(), tiny());
  CHECK(gen.x0.shape() == Shape{12, 48, 8, 8});
  CHECK_FALSE(gen.z_struct.defined());
  CHECK(gen.teacher.shape() == Shape{12, 16, 32});
  CHECK(gen.cls_target.shape() == Shape{12, 32});
  for (const auto& c : gen.conditions) CHECK(c.active_count() == 4);
  for (double v : gen.x0.data()) CHECK((v >= -1.0 && v <= 1.0));

  RunConfig sc = tiny();
  sc.task = Task::stain;
  sc.model.struct_channels = 48;
  sc.stain_group = 1;
  const auto st = TrainingSet::build(samples(), sc);
  CHECK(st.z_struct.shape() == Shape{12, 48, 8, 8});
  CHECK(same(unstack(st.z_struct, 3), unstack(gen.x0, 3)));
  for (const auto& c : st.conditions) {
    CHECK(c.is_active(Modality::image));
    CHECK(c.is_active(Modality::cls));
    CHECK_FALSE(c.is_active(Modality::text));
  }
  sc.stain_group = 2;
  CHECK_THROWS_AS(TrainingSet::build(samples(), sc), ShapeError);
}

TEST_CASE("zero steps leave the initialization untouched") {
  const auto ts = TrainingSet::build(samples(), tiny());
  Trainer a(tiny(), ts), b(tiny(), ts);
  const auto ck = a.checkpoint();
  CHECK(ck.step == 0);
  CHECK(ck.encode() == b.checkpoint().encode());
  const auto params = a.model().params().entries();
  REQUIRE(ck.model.size() == params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(ck.model[i].first == params[i].first);
    CHECK(same(ck.model[i].second, params[i].second));
    CHECK(same(ck.ema.shadow[i], params[i].second));
  }
  for (const auto& m : ck.optimizer.m)
    for (double x : m) CHECK(x == 0.0);
}

TEST_CASE("EMA decay warms up") {
  const auto ts = TrainingSet::build(samples(), tiny());
  RunConfig c = tiny();
  Trainer tr(c, ts);
  const auto before = tr.model().params().snapshot();
  tr.step();
  const double d = 2.0 / 11.0;
  CHECK(tr.checkpoint().ema.decay == d);
  const auto after = tr.model().params().snapshot();
  const auto ema = tr.checkpoint().ema.shadow;
  for (std::size_t i = 0; i < ema.size(); ++i)
    for (std::size_t j = 0; j < ema[i].numel(); ++j)
      CHECK(ema[i][j] == doctest::Approx(d * before[i][j] + (1.0 - d) * after[i][j]).epsilon(1e-14));
}

TEST_CASE("identical runs give identical logs and checkpoints") {
  const auto ts = TrainingSet::build(samples(), tiny());
  const auto d1 = scratch("det1"), d2 = scratch("det2");
  RunConfig c = tiny();
  c.checkpoint_every = 2;
  Trainer a(c, ts), b(c, ts);
  const auto la = train_run(a, d1, 5);
  train_run(b, d2, 5);
  CHECK(la.size() == 5);
  CHECK(io::read_file(d1 / "loss.tsv") == io::read_file(d2 / "loss.tsv"));
  CHECK(io::read_file(d1 / "final.ckpt") == io::read_file(d2 / "final.ckpt"));
  CHECK(fs::exists(d1 / "step_000002.ckpt"));
  CHECK(fs::exists(d1 / "step_000004.ckpt"));
  CHECK_FALSE(fs::exists(d1 / "step_000005.ckpt"));
  CHECK(RunConfig::load(d1 / "config.ini").to_ini() == c.to_ini());

  const auto log = LossLog::read(d1 / "loss.tsv");
  REQUIRE(log.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(log[i].step == i + 1);
    CHECK(log[i].total == la[i].total);
    CHECK(log[i].total == doctest::Approx(log[i].patch + 0.1 * log[i].cls + 0.5 * log[i].align).epsilon(1e-12));
  }

  // Another seed takes a different path.
  RunConfig other = c;
  other.seed = 18;
  Trainer o(other, ts);
  CHECK(o.step().total != la[0].total);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("resuming from a checkpoint continues the straight run exactly") {
  const auto ts = TrainingSet::build(samples(), tiny(AlignArm::repa));
  Trainer straight(tiny(AlignArm::repa), ts);
  for (int k = 0; k < 4; ++k) straight.step();

  Trainer first(tiny(AlignArm::repa), ts);
  first.step();
  first.step();
  const auto mid = Checkpoint::decode(first.checkpoint().encode());
  Trainer resumed(mid, ts);
  CHECK(resumed.steps_done() == 2);
  resumed.step();
  resumed.step();
  CHECK(resumed.checkpoint().encode() == straight.checkpoint().encode());

  // Appending to an existing log keeps a single header.
  const auto dir = scratch("append");
  Trainer t1(tiny(), ts);
  train_run(t1, dir, 2);
  Trainer t2(Checkpoint::load(dir / "final.ckpt"), ts);
  train_run(t2, dir, 3);
  const auto log = LossLog::read(dir / "loss.tsv");
  REQUIRE(log.size() == 3);
  CHECK(log[2].step == 3);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint persistence") {
  const auto ts = TrainingSet::build(samples(), tiny());
  Trainer tr(tiny(), ts);
  tr.step();
  tr.step();
  const auto dir = scratch("ckpt");
  fs::create_directories(dir);
  const auto path = dir / "a.ckpt";
  tr.checkpoint().save(path);
  const std::string bytes = io::read_file(path);
  CHECK(bytes.substr(0, 5) == "MUPD1");
  const auto loaded = Checkpoint::load(path);
  loaded.save(dir / "b.ckpt");
  CHECK(io::read_file(dir / "b.ckpt") == bytes);
  CHECK(loaded.step == 2);

  // Loaded weights reproduce the forward pass bit for bit.
  const auto raw = load_model(loaded, false);
  CHECK(forward_digest(raw, ts) == forward_digest(tr.model(), ts));
  CHECK(forward_digest(load_model(loaded), ts) == forward_digest(tr.ema_model(), ts));
  CHECK(forward_digest(load_model(loaded), ts) != forward_digest(raw, ts));

  CHECK_THROWS_AS(Checkpoint::decode(bytes.substr(0, bytes.size() / 2)), io::FormatError);
  CHECK_THROWS_AS(Checkpoint::decode(bytes.substr(0, 3)), io::FormatError);
  std::string flipped = bytes;
  flipped[bytes.size() / 3] ^= 0x10;
  CHECK_THROWS_AS(Checkpoint::decode(flipped), io::FormatError);
  std::string magic = bytes;
  magic[4] = '2';
  CHECK_THROWS_AS(Checkpoint::decode(magic), io::FormatError);

  // Version field, with a digest that matches the edited body.
  std::string body = bytes.substr(0, bytes.size() - 64);
  body[5] = 2;
  CHECK_THROWS_WITH_AS(Checkpoint::decode(body + io::sha256_hex(body)), doctest::Contains("version"),
                       io::FormatError);

  // A model with a different width rejects the shape headers.
  RunConfig wide = tiny();
  wide.model.dim = 48;
  wide.model.heads = 3;
  DiffusionTransformer other(wide.model, 1);
  CHECK_THROWS_WITH_AS(restore(other.params(), loaded.model, "model"), doctest::Contains("shape header"),
                       io::FormatError);
  fs::remove_all(dir);
}

TEST_CASE("non-finite step aborts and keeps the last good state") {
  auto ts = TrainingSet::build(samples(), tiny());
  const auto dir = scratch("nan");
  Trainer tr(tiny(), ts);
  train_run(tr, dir, 2);
  const auto good = tr.checkpoint().encode();
  for (auto& x : ts.x0.mutable_data()) x = std::numeric_limits<double>::quiet_NaN();
  try {
    train_run(tr, dir, 4);
    FAIL("expected an abort");
  } catch (const TrainingAborted& e) {
    CHECK(e.failed_step == 3);
    CHECK(io::read_file(e.last_good) == good);
  }
  CHECK(tr.steps_done() == 2);
  CHECK(LossLog::read(dir / "loss.tsv").size() == 2);
  fs::remove_all(dir);
}

TEST_CASE("training leaves data and frozen encoders unchanged") {
  const Conditioner conditioner;
  const auto cond_before = conditioner.encoder().weight_digest();
  const auto ts = TrainingSet::build(samples(), tiny(), conditioner);
  const auto data_before = io::tensor_digest({ts.x0, ts.teacher, ts.cls_target});
  Trainer tr(tiny(), ts);
  for (int k = 0; k < 3; ++k) tr.step();
  CHECK(io::tensor_digest({ts.x0, ts.teacher, ts.cls_target}) == data_before);
  CHECK(conditioner.encoder().weight_digest() == cond_before);
  CHECK(conditioner.encoder().weight_digest() == make_condition_encoder().weight_digest());
}
