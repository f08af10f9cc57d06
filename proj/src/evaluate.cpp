#include "mupad/evaluate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "mupad/dataset.hpp"
#include "mupad/encoder.hpp"
#include "mupad/io.hpp"
#include "mupad/pipelines.hpp"

namespace mupad {

namespace fs = std::filesystem;

namespace {

Eigen::MatrixXd rows(const Eigen::MatrixXd& m, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(i) = m.row(idx[i]);
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

Eigen::MatrixXd teacher_features(const std::vector<Tensor>& images) {
  static const StubEncoder teacher = make_teacher_encoder();
  Eigen::MatrixXd out(images.size(), teacher.width());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor cls = teacher.encode(images[i]).cls;
    for (std::size_t j = 0; j < cls.numel(); ++j) out(i, j) = cls[j];
  }
  return out;
}

double teacher_fid(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  return metrics::frechet_distance(teacher_features(a), teacher_features(b));
}

double teacher_similarity(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) throw ShapeError("paired similarity needs equally many images");
  return metrics::cosine_similarity_mean(teacher_features(a), teacher_features(b));
}

std::vector<Tensor> load_images(const fs::path& dir) {
  std::vector<Tensor> out;
  if (fs::exists(dir / "manifest.tsv")) {
    for (const auto& s : load_dataset(dir)) out.push_back(s.image);
    return out;
  }
  if (!fs::is_directory(dir)) throw Error("not an image directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back(io::read_ppm(f));
  if (out.empty()) throw Error("no images in " + dir.string());
  return out;
}

void save_images(const fs::path& dir, const std::vector<Tensor>& images, const std::string& prefix) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < images.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s%04zu.ppm", prefix.c_str(), i);
    io::write_ppm(dir / name, images[i]);
  }
}

std::vector<metrics::MetricReport> evaluate_images(const std::vector<Tensor>& real, const std::vector<Tensor>& fake,
                                                   std::size_t iterations, std::uint64_t seed) {
  if (real.size() < 2 || fake.size() < 2) throw Error("evaluation needs at least two images per set");
  const Eigen::MatrixXd fr = teacher_features(real), ff = teacher_features(fake);
  std::vector<metrics::MetricReport> out;
  out.push_back(metrics::bootstrap(
      "fid", real.size(), fake.size(),
      [&](const auto& ia, const auto& ib) { return metrics::frechet_distance(rows(fr, ia), rows(ff, ib)); },
      iterations, derive_seed(seed, 1)));
  out.push_back(metrics::bootstrap(
      "kid", real.size(), fake.size(),
      [&](const auto& ia, const auto& ib) { return metrics::kid(rows(fr, ia), rows(ff, ib)); }, iterations,
      derive_seed(seed, 2)));

  std::vector<double> dr, df;
  for (const auto& im : real) dr.push_back(synth::oracle_density(im));
  for (const auto& im : fake) df.push_back(synth::oracle_density(im));
  auto pick = [](const std::vector<double>& v, const std::vector<std::size_t>& idx) {
    std::vector<double> o;
    for (std::size_t i : idx) o.push_back(v[i]);
    return o;
  };
  out.push_back(metrics::bootstrap(
      "density_w1", real.size(), fake.size(),
      [&](const auto& ia, const auto& ib) { return metrics::wasserstein1(pick(dr, ia), pick(df, ib)); }, iterations,
      derive_seed(seed, 3)));

  if (real.size() == fake.size()) {
    out.push_back(metrics::bootstrap(
        "teacher_similarity", real.size(),
        [&](const auto& idx) { return metrics::cosine_similarity_mean(rows(fr, idx), rows(ff, idx)); }, iterations,
        derive_seed(seed, 4)));
  }
  return out;
}

std::string report_tsv(const std::vector<metrics::MetricReport>& rows) {
  std::ostringstream os;
  os << "metric\tvalue\tci_low\tci_high\titerations\tseed\n";
  for (const auto& r : rows) {
    os << r.name << '\t' << fmt(r.value) << '\t' << fmt(r.ci_low) << '\t' << fmt(r.ci_high) << '\t' << r.iterations
       << '\t' << r.seed << '\n';
  }
  return os.str();
}

Tensor loss_plot(const std::vector<StepLoss>& log, std::size_t width, std::size_t height) {
  if (width < 16 || height < 16) throw Error("plot is too small");
  Tensor img({3, height, width}, 1.0);
  auto px = img.mutable_data();
  const std::size_t plane = width * height;
  const std::size_t margin = 6;
  // Axes.
  for (std::size_t x = margin; x < width - margin; ++x)
    for (std::size_t c = 0; c < 3; ++c) px[c * plane + (height - margin) * width + x] = 0.6;
  for (std::size_t y = margin; y <= height - margin; ++y)
    for (std::size_t c = 0; c < 3; ++c) px[c * plane + y * width + margin] = 0.6;
  if (log.empty()) return img;

  double lo = log.front().patch, hi = lo;
  for (const auto& s : log) {
    lo = std::min({lo, s.total, s.patch});
    hi = std::max({hi, s.total, s.patch});
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const double w = static_cast<double>(width - 2 * margin - 1), h = static_cast<double>(height - 2 * margin);
  auto point = [&](std::size_t i, double v) {
    const double x = margin + (log.size() > 1 ? w * i / (log.size() - 1) : 0.0);
    const double y = height - margin - h * (v - lo) / (hi - lo);
    return std::pair{x, y};
  };
  auto draw = [&](auto value, std::array<double, 3> rgb) {
    for (std::size_t i = 0; i + 1 < std::max<std::size_t>(log.size(), 2); ++i) {
      const std::size_t j = std::min(i + 1, log.size() - 1);
      const auto [x0, y0] = point(i, value(log[i]));
      const auto [x1, y1] = point(j, value(log[j]));
      const int n = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
      for (int k = 0; k <= n; ++k) {
        const double u = static_cast<double>(k) / n;
        const auto x = static_cast<std::size_t>(std::lround(x0 + u * (x1 - x0)));
        const auto y = static_cast<std::size_t>(std::lround(y0 + u * (y1 - y0)));
        if (x >= width || y >= height) continue;
        for (std::size_t c = 0; c < 3; ++c) px[c * plane + y * width + x] = rgb[c];
      }
    }
  };
  draw([](const StepLoss& s) { return s.total; }, {0.0, 0.0, 0.0});
  draw([](const StepLoss& s) { return s.patch; }, {0.85, 0.1, 0.1});
  return img;
}

AblationCell run_ablation_cell(const AblationSetup& setup, CrossAttentionVariant variant, AlignArm arm,
                               std::uint64_t seed, const fs::path& run_dir) {
  if (!setup.train) throw Error("ablation needs a training set");
  if (setup.references.size() < 2) throw Error("ablation needs at least two reference images");
  RunConfig cfg = setup.base;
  cfg.model.variant = variant;
  cfg.arm = arm;
  cfg.seed = seed;
  Trainer tr(cfg, *setup.train);
  std::vector<StepLoss> log;
  if (!run_dir.empty()) {
    log = train_run(tr, run_dir, cfg.steps);
  } else {
    while (tr.steps_done() < cfg.steps) log.push_back(tr.step());
  }

  AblationCell cell{variant, arm, seed, 0.0, 0.0, 0.0};
  const std::size_t tail = std::min<std::size_t>(100, log.size());
  for (std::size_t i = log.size() - tail; i < log.size(); ++i) cell.final_loss += log[i].patch / tail;

  const DiffusionTransformer model = tr.ema_model();
  const Conditioner conditioner;
  std::vector<Tensor> generated;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < setup.references.size(); start += kChunk) {
    ConditionBatch cond;
    for (std::size_t i = start; i < std::min(start + kChunk, setup.references.size()); ++i)
      cond.push_back(conditioner.from_image(setup.references[i]));
    const flow::SamplerConfig sampler{setup.sample_steps, flow::SamplerMode::ode, 0.0,
                                      derive_seed(derive_seed(seed, 0xab1a), start)};
    for (auto& im : sample_images(model, cond, sampler, cfg.guidance())) generated.push_back(im);
  }
  cell.fid = teacher_fid(generated, setup.references);
  cell.similarity = teacher_similarity(generated, setup.references);
  if (!run_dir.empty()) save_images(run_dir / "samples", generated);
  return cell;
}

std::string ablation_tsv(const std::vector<AblationCell>& cells) {
  std::ostringstream os;
  os << "variant\tarm\tseed\tfid\tsimilarity\tfinal_loss\n";
  for (const auto& c : cells) {
    os << variant_name(c.variant) << '\t' << align_arm_name(c.arm) << '\t' << c.seed << '\t' << fmt(c.fid) << '\t'
       << fmt(c.similarity) << '\t' << fmt(c.final_loss) << '\n';
  }
  return os.str();
}

std::string ablation_summary(const std::vector<AblationCell>& cells) {
  std::map<std::pair<std::string, std::string>, std::vector<const AblationCell*>> groups;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& c : cells) {
    const auto key = std::pair{variant_name(c.variant), align_arm_name(c.arm)};
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&c);
  }
  std::ostringstream os;
  os << "variant\tarm\tseeds\tfid_mean\tfid_per_seed\tsimilarity_mean\tsimilarity_per_seed\n";
  for (const auto& key : order) {
    const auto& g = groups[key];
    double fid = 0.0, sim = 0.0;
    std::string fids, sims;
    for (const auto* c : g) {
      fid += c->fid / g.size();
      sim += c->similarity / g.size();
      fids += (fids.empty() ? "" : ",") + fmt(c->fid);
      sims += (sims.empty() ? "" : ",") + fmt(c->similarity);
    }
    os << key.first << '\t' << key.second << '\t' << g.size() << '\t' << fmt(fid) << '\t' << fids << '\t' << fmt(sim)
       << '\t' << sims << '\n';
  }
  return os.str();
}

}  // namespace mupad
