#include <algorithm>
#include <cmath>
#include <numbers>

#include "sslecho/data.hpp"
#include "sslecho/error.hpp"

namespace sslecho {

void SynthConfig::validate() const {
  if (n_labeled_patients == 0) throw ConfigError("synth: n_labeled_patients must be positive");
  if (!(other_fraction > 0.0 && other_fraction < 1.0)) throw ConfigError("synth: other_fraction must be in (0, 1)");
  if (images_per_patient.first == 0 || images_per_patient.first > images_per_patient.second) {
    throw ConfigError("synth: images_per_patient must satisfy 1 <= min <= max");
  }
  if (image_size < 8) throw ConfigError("synth: image_size must be at least 8");
  if (!(noise_level >= 0.0)) throw ConfigError("synth: noise_level must be non-negative");
  if (!(doppler_fraction >= 0.0 && doppler_fraction <= 1.0)) {
    throw ConfigError("synth: doppler_fraction must be in [0, 1]");
  }
  if (split_ratio.train == 0 || split_ratio.valid == 0 || split_ratio.test == 0) {
    throw ConfigError("synth: split ratio parts must be positive");
  }
}

namespace {

constexpr double kPi = std::numbers::pi;

// Soft membership in [0, 1] for signed distance d (negative inside), edge
// width in normalized units.
double soft_inside(double d, double edge) { return std::clamp(0.5 - d / edge, 0.0, 1.0); }

struct Canvas {
  std::size_t size;
  std::vector<double> v;
  explicit Canvas(std::size_t s) : size(s), v(s * s, 0.0) {}

  // Calls f(x, y) with pixel-center coordinates in [-1, 1] (y grows downward).
  template <typename F>
  void paint(F&& f) {
    for (std::size_t r = 0; r < size; ++r)
      for (std::size_t c = 0; c < size; ++c) {
        const double x = (2.0 * (c + 0.5) / size) - 1.0;
        const double y = (2.0 * (r + 0.5) / size) - 1.0;
        v[r * size + c] += f(x, y);
      }
  }
};

struct Pose {
  double cx, cy, scale, angle;
};

Pose draw_pose(Rng& rng) {
  return {rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(0.85, 1.15), rng.uniform(-kPi, kPi)};
}

// Coordinates in the shape frame.
std::pair<double, double> local(const Pose& p, double x, double y, double angle) {
  const double dx = (x - p.cx) / p.scale;
  const double dy = (y - p.cy) / p.scale;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * dx + s * dy, -s * dx + c * dy};
}

double edge_width(std::size_t size) { return 2.0 / static_cast<double>(size); }

void ellipse_outline(Canvas& cv, const Pose& p, double a, double b, double thickness, double intensity,
                     double angle) {
  const double edge = edge_width(cv.size);
  cv.paint([&](double x, double y) {
    const auto [u, w] = local(p, x, y, angle);
    const double r = std::sqrt((u / a) * (u / a) + (w / b) * (w / b));
    const double d = std::abs(r - 1.0) * std::min(a, b) - thickness / 2;
    return intensity * soft_inside(d * p.scale, edge);
  });
}

void filled_ellipse(Canvas& cv, const Pose& p, double a, double b, double intensity, double angle) {
  const double edge = edge_width(cv.size);
  cv.paint([&](double x, double y) {
    const auto [u, w] = local(p, x, y, angle);
    const double r = std::sqrt((u / a) * (u / a) + (w / b) * (w / b));
    return intensity * soft_inside((r - 1.0) * std::min(a, b) * p.scale, edge);
  });
}

void bar(Canvas& cv, const Pose& p, double half_len, double half_width, double offset, double intensity,
         double angle) {
  const double edge = edge_width(cv.size);
  cv.paint([&](double x, double y) {
    const auto [u, w] = local(p, x, y, angle);
    const double d = std::max(std::abs(u) - half_len, std::abs(w - offset) - half_width);
    return intensity * soft_inside(d * p.scale, edge);
  });
}

void blob(Canvas& cv, double cx, double cy, double radius, double intensity) {
  cv.paint([&](double x, double y) {
    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
    return intensity * std::exp(-d2 / (2.0 * radius * radius));
  });
}

// Faint ultrasound sector opening downward from the top center.
void fan(Canvas& cv, double intensity) {
  cv.paint([&](double x, double y) {
    const double dy = y + 1.1;
    const double r = std::sqrt(x * x + dy * dy);
    const double theta = std::atan2(x, dy);
    return (std::abs(theta) < 0.8 && r < 2.2) ? intensity : 0.0;
  });
}

void render_other(Canvas& cv, Rng& rng, double gain) {
  const Pose p = draw_pose(rng);
  const double inten = gain * rng.uniform(0.45, 0.7);
  switch (rng.uniform_int(std::size_t{5})) {
    case 0:  // filled disc
      filled_ellipse(cv, p, 0.4, 0.4 * rng.uniform(0.8, 1.0), inten, p.angle);
      break;
    case 1:  // parallel bars
      bar(cv, p, 0.6, 0.08, -0.2, inten, p.angle);
      bar(cv, p, 0.6, 0.08, 0.2, inten, p.angle);
      break;
    case 2:  // cross
      bar(cv, p, 0.55, 0.09, 0.0, inten, p.angle);
      bar(cv, p, 0.55, 0.09, 0.0, inten, p.angle + kPi / 2);
      break;
    case 3: {  // scattered dots
      const std::size_t n = 3 + rng.uniform_int(std::size_t{4});
      for (std::size_t i = 0; i < n; ++i)
        blob(cv, rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(0.07, 0.12), inten);
      break;
    }
    default: {  // two chambers
      Pose left = p, right = p;
      const double c = std::cos(p.angle), s = std::sin(p.angle);
      left.cx -= 0.3 * c;
      left.cy -= 0.3 * s;
      right.cx += 0.3 * c;
      right.cy += 0.3 * s;
      ellipse_outline(cv, left, 0.25, 0.35, 0.12, inten, p.angle);
      ellipse_outline(cv, right, 0.25, 0.35, 0.12, inten, p.angle);
      break;
    }
  }
}

}  // namespace

std::vector<Scalar> render_synthetic_image(View view, Diagnosis diagnosis, std::size_t size, double noise_level,
                                           Rng& rng) {
  Canvas cv(size);
  const double gain = rng.uniform(0.8, 1.2);
  fan(cv, 0.08 * gain);
  if (view == View::kOther) {
    render_other(cv, rng, gain);
  } else {
    Pose p = draw_pose(rng);
    const double inten = gain * rng.uniform(0.45, 0.7);
    if (view == View::kPLAX) {
      p.angle = rng.uniform(-0.6, 0.6);  // tilted long axis
      ellipse_outline(cv, p, 0.7, 0.32, 0.13, inten, p.angle);
    } else {
      ellipse_outline(cv, p, 0.45, 0.45 * rng.uniform(0.9, 1.0), 0.13, inten, p.angle);
    }
    // Valve: grows and brightens with severity.
    const auto sev = static_cast<double>(static_cast<int>(diagnosis));
    const double radius = (0.08 + 0.07 * sev) * rng.uniform(0.9, 1.1) * p.scale;
    const double valve = gain * (0.25 + 0.35 * sev) * rng.uniform(0.9, 1.1);
    blob(cv, p.cx, p.cy, radius, valve);
  }
  std::vector<Scalar> out(size * size);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double noisy = cv.v[i] + noise_level * rng.normal();
    out[i] = static_cast<Scalar>(std::clamp(noisy, 0.0, 1.0));
  }
  return out;
}

SynthResult synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t total = cfg.n_labeled_patients + cfg.n_unlabeled_patients;
  const Rng root(cfg.seed);
  Rng assign = root.split("assign");
  // Which patients are labeled is a random subset, so ids carry no signal.
  std::vector<std::size_t> order = assign.permutation(total);
  std::vector<bool> labeled(total, false);
  for (std::size_t i = 0; i < cfg.n_labeled_patients; ++i) labeled[order[i]] = true;

  const std::size_t width = std::to_string(total > 0 ? total - 1 : 0).size();
  auto pad = [](std::size_t v, std::size_t w) {
    std::string s = std::to_string(v);
    return std::string(w > s.size() ? w - s.size() : 0, '0') + s;
  };

  std::vector<StudyRecord> studies;
  std::vector<ImageRecord> images;
  std::vector<StudyLabel> labels;
  const double relevant = (1.0 - cfg.other_fraction) / 2.0;
  for (std::size_t n = 0; n < total; ++n) {
    Rng patient = root.split("patient").split(static_cast<std::uint64_t>(n));
    const auto diagnosis = static_cast<Diagnosis>(patient.uniform_int(kNumDiagnoses));
    const auto count = static_cast<std::size_t>(patient.uniform_int(static_cast<long>(cfg.images_per_patient.first),
                                                                    static_cast<long>(cfg.images_per_patient.second)));
    const std::string study_id = "study_" + pad(n, std::max<std::size_t>(width, 4));
    StudyRecord study{study_id, {}, std::nullopt};
    if (labeled[n]) study.diagnosis_label = diagnosis;
    labels.push_back({study_id, study.diagnosis_label});
    const std::size_t img_width = std::to_string(count - 1).size();
    for (std::size_t i = 0; i < count; ++i) {
      Rng img_rng = patient.split(static_cast<std::uint64_t>(i));
      const double u = img_rng.uniform();
      const View view = u < cfg.other_fraction            ? View::kOther
                        : u < cfg.other_fraction + relevant ? View::kPLAX
                                                            : View::kPSAX;
      ImageRecord rec;
      rec.study_id = study_id;
      rec.image_id = "img_" + pad(i, std::max<std::size_t>(img_width, 2));
      rec.size = cfg.image_size;
      rec.pixels = render_synthetic_image(view, diagnosis, cfg.image_size, cfg.noise_level, img_rng);
      rec.source_dims = {cfg.image_size, cfg.image_size};
      if (labeled[n]) rec.view_label = view;
      study.image_ids.push_back(rec.image_id);
      images.push_back(std::move(rec));
    }
    studies.push_back(std::move(study));
  }

  SplitSpec split = make_splits(labels, cfg.split_ratio, 1, root.split("split").seed()).front();
  return {Dataset(cfg.image_size, std::move(studies), std::move(images)), std::move(split)};
}

}  // namespace sslecho
