#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sslecho/data.hpp"
#include "sslecho/error.hpp"
#include "sslecho/log.hpp"
#include "sslecho/png_io.hpp"

namespace fs = std::filesystem;

namespace sslecho {

std::string to_string(View view) {
  switch (view) {
    case View::kPLAX: return "PLAX";
    case View::kPSAX: return "PSAX";
    case View::kOther: return "Other";
  }
  return "?";
}

std::string to_string(Diagnosis diagnosis) {
  switch (diagnosis) {
    case Diagnosis::kNoAS: return "no_AS";
    case Diagnosis::kMildModAS: return "mild_mod_AS";
    case Diagnosis::kSevereAS: return "severe_AS";
  }
  return "?";
}

View view_from_string(const std::string& text) {
  if (text == "PLAX") return View::kPLAX;
  if (text == "PSAX") return View::kPSAX;
  if (text == "Other") return View::kOther;
  throw FormatError("unknown view label '" + text + "' (expected PLAX|PSAX|Other)");
}

Diagnosis diagnosis_from_string(const std::string& text) {
  if (text == "no_AS") return Diagnosis::kNoAS;
  if (text == "mild_mod_AS") return Diagnosis::kMildModAS;
  if (text == "severe_AS") return Diagnosis::kSevereAS;
  throw FormatError("unknown diagnosis label '" + text + "' (expected no_AS|mild_mod_AS|severe_AS)");
}

std::string to_string(Partition partition) {
  switch (partition) {
    case Partition::kTrain: return "train";
    case Partition::kValid: return "valid";
    case Partition::kTest: return "test";
    case Partition::kUnlabeled: return "unlabeled";
  }
  return "?";
}

Partition partition_from_string(const std::string& text) {
  if (text == "train") return Partition::kTrain;
  if (text == "valid") return Partition::kValid;
  if (text == "test") return Partition::kTest;
  if (text == "unlabeled") return Partition::kUnlabeled;
  throw FormatError("unknown partition '" + text + "' (expected train|valid|test|unlabeled)");
}

// --- Dataset ---

Dataset::Dataset(std::size_t image_size, std::vector<StudyRecord> studies, std::vector<ImageRecord> images)
    : image_size_(image_size), studies_(std::move(studies)), images_(std::move(images)) {
  std::sort(studies_.begin(), studies_.end(),
            [](const StudyRecord& a, const StudyRecord& b) { return a.study_id < b.study_id; });
  std::sort(images_.begin(), images_.end(), [](const ImageRecord& a, const ImageRecord& b) {
    return std::tie(a.study_id, a.image_id) < std::tie(b.study_id, b.image_id);
  });
  for (std::size_t i = 0; i < studies_.size(); ++i) {
    if (!study_index_.emplace(studies_[i].study_id, i).second) {
      throw IntegrityError("duplicate study id '" + studies_[i].study_id + "'");
    }
    images_by_study_[studies_[i].study_id];
  }
  for (std::size_t i = 0; i < images_.size(); ++i) {
    const ImageRecord& img = images_[i];
    if (img.size != image_size_ || img.pixels.size() != image_size_ * image_size_) {
      throw DimensionError("image " + img.study_id + "/" + img.image_id + " is not " +
                           std::to_string(image_size_) + "x" + std::to_string(image_size_));
    }
    auto it = images_by_study_.find(img.study_id);
    if (it == images_by_study_.end()) {
      throw IntegrityError("image " + img.image_id + " references unknown study '" + img.study_id + "'");
    }
    if (!it->second.empty() && images_[it->second.back()].image_id == img.image_id) {
      throw IntegrityError("duplicate image id '" + img.image_id + "' in study '" + img.study_id + "'");
    }
    it->second.push_back(i);
  }
  for (StudyRecord& s : studies_) {
    s.image_ids.clear();
    for (std::size_t i : images_by_study_[s.study_id]) s.image_ids.push_back(images_[i].image_id);
  }
}

bool Dataset::has_study(const std::string& study_id) const { return study_index_.count(study_id) > 0; }

const StudyRecord& Dataset::study(const std::string& study_id) const {
  auto it = study_index_.find(study_id);
  if (it == study_index_.end()) throw IntegrityError("unknown study '" + study_id + "'");
  return studies_[it->second];
}

const std::vector<std::size_t>& Dataset::image_indices(const std::string& study_id) const {
  auto it = images_by_study_.find(study_id);
  if (it == images_by_study_.end()) throw IntegrityError("unknown study '" + study_id + "'");
  return it->second;
}

std::optional<std::size_t> Dataset::find_image(const std::string& study_id, const std::string& image_id) const {
  auto it = images_by_study_.find(study_id);
  if (it == images_by_study_.end()) return std::nullopt;
  for (std::size_t i : it->second)
    if (images_[i].image_id == image_id) return i;
  return std::nullopt;
}

std::optional<std::size_t> Dataset::label(std::size_t image_index, Task task) const {
  const ImageRecord& img = images_.at(image_index);
  if (task == Task::kView) {
    if (!img.view_label) return std::nullopt;
    return static_cast<std::size_t>(*img.view_label);
  }
  const StudyRecord& s = study(img.study_id);
  if (!s.diagnosis_label) return std::nullopt;
  return static_cast<std::size_t>(*s.diagnosis_label);
}

Tensor Dataset::batch(std::span<const std::size_t> image_indices) const {
  const std::size_t per = image_size_ * image_size_;
  std::vector<Scalar> values(image_indices.size() * per);
  for (std::size_t b = 0; b < image_indices.size(); ++b) {
    const ImageRecord& img = images_.at(image_indices[b]);
    std::copy(img.pixels.begin(), img.pixels.end(), values.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return Tensor::from({image_indices.size(), 1, image_size_, image_size_}, std::move(values));
}

// --- SplitSpec ---

const std::set<std::string>& SplitSpec::partition(Partition p) const {
  switch (p) {
    case Partition::kTrain: return labeled_train;
    case Partition::kValid: return validation;
    case Partition::kTest: return test;
    case Partition::kUnlabeled: return unlabeled_pool;
  }
  return unlabeled_pool;
}

std::optional<Partition> SplitSpec::partition_of(const std::string& study_id) const {
  for (Partition p : {Partition::kTrain, Partition::kValid, Partition::kTest, Partition::kUnlabeled})
    if (partition(p).count(study_id)) return p;
  return std::nullopt;
}

bool SplitSpec::is_labeled(const std::string& study_id) const {
  const auto p = partition_of(study_id);
  return p && *p != Partition::kUnlabeled;
}

void SplitSpec::validate() const {
  const Partition all[] = {Partition::kTrain, Partition::kValid, Partition::kTest, Partition::kUnlabeled};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j)
      for (const std::string& id : partition(all[i]))
        if (partition(all[j]).count(id)) {
          throw SplitError("study '" + id + "' is in both " + to_string(all[i]) + " and " + to_string(all[j]));
        }
}

std::vector<std::size_t> partition_images(const Dataset& dataset, const SplitSpec& split, Partition p) {
  std::vector<std::size_t> out;
  for (const std::string& id : split.partition(p)) {
    if (!dataset.has_study(id)) continue;
    const auto& idx = dataset.image_indices(id);
    out.insert(out.end(), idx.begin(), idx.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// --- CSV helpers ---

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

// Rows of a CSV with the exact expected header; blank lines are skipped.
std::vector<std::vector<std::string>> read_csv(const std::string& path, const std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::uint64_t line_no = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (!seen_header) {
      if (fields != header) throw ParseError("unexpected header in '" + path + "'", line_no);
      seen_header = true;
      continue;
    }
    if (fields.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields in '" + path + "'", line_no);
    }
    rows.push_back(std::move(fields));
  }
  if (!seen_header) throw ParseError("missing header in '" + path + "'", line_no);
  return rows;
}

void ensure_parent(const fs::path& p) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  if (ec) throw IoError("cannot create directory '" + p.parent_path().string() + "': " + ec.message());
}

std::ofstream open_out(const fs::path& p) {
  ensure_parent(p);
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  return out;
}

std::vector<std::uint8_t> to_bytes(std::span<const Scalar> pixels) {
  std::vector<std::uint8_t> bytes(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double v = std::clamp(static_cast<double>(pixels[i]), 0.0, 1.0);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return bytes;
}

}  // namespace

std::string fold_path(const std::string& root, std::size_t fold) {
  return (fs::path(root) / "splits" / ("fold" + std::to_string(fold) + ".csv")).string();
}

SplitSpec read_split_csv(const std::string& path) {
  SplitSpec split;
  for (const auto& row : read_csv(path, {"study_id", "partition"})) {
    const Partition p = partition_from_string(row[1]);
    std::set<std::string>* target = nullptr;
    switch (p) {
      case Partition::kTrain: target = &split.labeled_train; break;
      case Partition::kValid: target = &split.validation; break;
      case Partition::kTest: target = &split.test; break;
      case Partition::kUnlabeled: target = &split.unlabeled_pool; break;
    }
    if (split.partition_of(row[0])) throw SplitError("study '" + row[0] + "' listed twice in '" + path + "'");
    target->insert(row[0]);
  }
  split.validate();
  return split;
}

void write_split_csv(const SplitSpec& split, const std::string& path) {
  split.validate();
  std::ofstream out = open_out(path);
  out << "study_id,partition\n";
  for (Partition p : {Partition::kTrain, Partition::kValid, Partition::kTest, Partition::kUnlabeled})
    for (const std::string& id : split.partition(p)) out << id << ',' << to_string(p) << '\n';
}

std::map<std::string, Diagnosis> read_diagnosis_csv(const std::string& path) {
  std::map<std::string, Diagnosis> out;
  for (const auto& row : read_csv(path, {"study_id", "diagnosis"})) {
    if (!out.emplace(row[0], diagnosis_from_string(row[1])).second) {
      throw IntegrityError("study '" + row[0] + "' has more than one diagnosis row");
    }
  }
  return out;
}

LoadResult load_tmed(const std::string& root, const SplitSpec& split, const LoadOptions& options) {
  split.validate();
  const fs::path base(root);
  const auto diagnoses = read_diagnosis_csv((base / "labels" / "diagnosis.csv").string());
  std::map<std::pair<std::string, std::string>, View> views;
  for (const auto& row : read_csv((base / "labels" / "views.csv").string(), {"study_id", "image_id", "view"})) {
    views[{row[0], row[1]}] = view_from_string(row[2]);
  }

  std::set<std::string> all;
  for (Partition p : {Partition::kTrain, Partition::kValid, Partition::kTest, Partition::kUnlabeled})
    all.insert(split.partition(p).begin(), split.partition(p).end());

  LoadResult result;
  std::vector<StudyRecord> studies;
  std::vector<ImageRecord> images;
  for (const std::string& study_id : all) {
    const bool labeled = split.is_labeled(study_id);
    StudyRecord study{study_id, {}, std::nullopt};
    if (labeled) {
      auto it = diagnoses.find(study_id);
      if (it == diagnoses.end()) throw IntegrityError("no diagnosis label for study '" + study_id + "'");
      study.diagnosis_label = it->second;
    }
    const fs::path dir = base / "images" / study_id;
    if (!fs::is_directory(dir)) throw IntegrityError("no image directory for study '" + study_id + "'");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    std::sort(files.begin(), files.end());

    std::size_t kept = 0;
    for (const fs::path& file : files) {
      const std::string image_id = file.stem().string();
      PixelGrid raw;
      try {
        const auto [w, h] = read_png_dims(file.string());
        if (is_doppler(w, h, options.doppler_dims)) {
          ++result.doppler_dropped;
          continue;
        }
        raw = read_png(file.string());
      } catch (const FormatError& e) {
        log::warning(std::string("skipping unreadable image: ") + e.what());
        ++result.unreadable;
        continue;
      }
      ImageRecord rec;
      rec.study_id = study_id;
      rec.image_id = image_id;
      rec.size = options.image_size;
      rec.pixels = preprocess_image(raw, options.image_size);
      rec.source_dims = {raw.width, raw.height};
      if (labeled) {
        auto it = views.find({study_id, image_id});
        if (it == views.end()) {
          throw IntegrityError("no view label for image '" + image_id + "' of study '" + study_id + "'");
        }
        rec.view_label = it->second;
      }
      images.push_back(std::move(rec));
      ++kept;
    }
    if (kept == 0) {
      log::warning("study '" + study_id + "' has no usable images; dropped");
      continue;
    }
    studies.push_back(std::move(study));
  }
  if (result.doppler_dropped > 0) {
    log::info("dropped " + std::to_string(result.doppler_dropped) + " Doppler-sized image(s)");
  }
  result.dataset = Dataset(options.image_size, std::move(studies), std::move(images));
  return result;
}

void write_tmed(const Dataset& dataset, const SplitSpec& split, const std::string& root, std::size_t fold) {
  const fs::path base(root);
  const std::size_t s = dataset.image_size();
  for (const ImageRecord& img : dataset.images()) {
    const fs::path file = base / "images" / img.study_id / (img.image_id + ".png");
    ensure_parent(file);
    write_png(file.string(), s, s, 1, to_bytes(img.pixels));
  }
  std::ofstream diag = open_out(base / "labels" / "diagnosis.csv");
  diag << "study_id,diagnosis\n";
  std::ofstream views = open_out(base / "labels" / "views.csv");
  views << "study_id,image_id,view\n";
  for (const StudyRecord& study : dataset.studies()) {
    if (!split.is_labeled(study.study_id)) continue;
    if (!study.diagnosis_label) {
      throw IntegrityError("labeled study '" + study.study_id + "' has no diagnosis label");
    }
    diag << study.study_id << ',' << to_string(*study.diagnosis_label) << '\n';
    for (std::size_t i : dataset.image_indices(study.study_id)) {
      const ImageRecord& img = dataset.images()[i];
      if (!img.view_label) {
        throw IntegrityError("labeled image '" + img.image_id + "' has no view label");
      }
      views << img.study_id << ',' << img.image_id << ',' << to_string(*img.view_label) << '\n';
    }
  }
  write_split_csv(split, fold_path(root, fold));
}

std::size_t write_doppler_decoys(const Dataset& dataset, const std::string& root, double fraction, Rng& rng) {
  const DopplerList& dims = default_doppler_dims();
  std::size_t written = 0;
  for (const StudyRecord& study : dataset.studies()) {
    if (!rng.bernoulli(fraction)) continue;
    const auto [w, h] = dims[rng.uniform_int(dims.size())];
    std::vector<std::uint8_t> pixels(w * h);
    // Dark trace band so the decoy is a valid, non-blank image.
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        pixels[y * w + x] = static_cast<std::uint8_t>(y > h / 3 && (x + y) % 7 == 0 ? 200 : 10);
    const fs::path file = fs::path(root) / "images" / study.study_id / "doppler_decoy.png";
    ensure_parent(file);
    write_png(file.string(), w, h, 1, pixels);
    ++written;
  }
  return written;
}

}  // namespace sslecho
