#include "m3/dataset.hpp"

#include "m3/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace m3 {

namespace fs = std::filesystem;

const char* feature_name(Feature f) {
  switch (f) {
    case Feature::rpd: return "rpd";
    case Feature::ga: return "ga";
    default: return "pigment";
  }
}

Feature parse_feature(const std::string& name) {
  if (name == "rpd") return Feature::rpd;
  if (name == "ga") return Feature::ga;
  if (name == "pigment") return Feature::pigment;
  fail("unknown feature '" + name + "' (expected rpd, ga, or pigment)");
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

Split SplitAssignment::of(const ExamRecord& r) const {
  auto it = by_participant.find(r.participant_id);
  require(it != by_participant.end(),
          "split: participant '" + r.participant_id + "' has no assignment");
  return it->second;
}

Dim SplitAssignment::count(Split s) const {
  Dim n = 0;
  for (const auto& [id, sp] : by_participant)
    if (sp == s) ++n;
  return n;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

int parse_label(const std::string& raw, const std::string& column, std::size_t row) {
  if (raw.empty() || raw == "NA") return -1;
  if (raw == "0") return 0;
  if (raw == "1") return 1;
  fail("manifest row " + std::to_string(row) + ": malformed " + column + " label '" + raw +
       "' (expected 0, 1, or NA)");
}

constexpr const char* kManifestHeader =
    "participant_id,eye,visit,cfp_path,faf_path,rpd,ga,pigment";

}  // namespace

std::vector<ExamRecord> load_manifest(const std::string& csv_path) {
  std::ifstream in(csv_path);
  require(static_cast<bool>(in), "manifest: cannot open " + csv_path);
  const fs::path base = fs::path(csv_path).parent_path();

  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "manifest: empty file " + csv_path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == kManifestHeader, "manifest: bad header '" + line + "', expected '" +
                                       kManifestHeader + "'");

  std::vector<ExamRecord> records;
  std::set<std::string> seen_keys;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    require(f.size() == 8, "manifest row " + std::to_string(row) + ": expected 8 fields, got " +
                               std::to_string(f.size()));
    ExamRecord r;
    r.participant_id = f[0];
    r.eye = f[1];
    r.visit = f[2];
    require(!r.participant_id.empty(), "manifest row " + std::to_string(row) +
                                           ": empty participant_id");
    require(r.eye == "left" || r.eye == "right",
            "manifest row " + std::to_string(row) + ": eye must be left or right, got '" +
                r.eye + "'");

    auto resolve = [&](const std::string& p) {
      fs::path path(p);
      return (path.is_absolute() ? path : base / path).string();
    };
    r.cfp_path = resolve(f[3]);
    r.faf_path = resolve(f[4]);
    for (const auto& [tag, path] : {std::pair<const char*, std::string&>{"cfp_path", r.cfp_path},
                                    {"faf_path", r.faf_path}})
      require(fs::exists(path), "manifest row " + std::to_string(row) + ": " + tag + " '" +
                                    path + "' does not exist");

    r.labels.rpd = parse_label(f[5], "rpd", row);
    r.labels.ga = parse_label(f[6], "ga", row);
    r.labels.pigment = parse_label(f[7], "pigment", row);

    const std::string key = r.record_id();
    require(seen_keys.insert(key).second,
            "manifest row " + std::to_string(row) + ": duplicate (participant,eye,visit) key '" +
                key + "'");
    records.push_back(std::move(r));
  }
  require(!records.empty(), "manifest: no data rows in " + csv_path);
  return records;
}

void save_manifest(const std::string& csv_path, const std::vector<ExamRecord>& records) {
  std::ofstream out(csv_path);
  require(static_cast<bool>(out), "manifest: cannot write " + csv_path);
  out << kManifestHeader << "\n";
  auto lab = [](int v) { return v < 0 ? std::string("NA") : std::to_string(v); };
  // Image paths are stored relative to the manifest so the dataset directory
  // stays relocatable; load_manifest resolves them against the same base.
  const fs::path base = fs::absolute(fs::path(csv_path).parent_path()).lexically_normal();
  auto rel = [&base](const std::string& p) {
    const fs::path r = fs::absolute(p).lexically_normal().lexically_relative(base);
    return r.empty() ? p : r.string();
  };
  for (const auto& r : records)
    out << r.participant_id << ',' << r.eye << ',' << r.visit << ',' << rel(r.cfp_path) << ','
        << rel(r.faf_path) << ',' << lab(r.labels.rpd) << ',' << lab(r.labels.ga) << ','
        << lab(r.labels.pigment) << "\n";
  require(static_cast<bool>(out), "manifest: write failed for " + csv_path);
}

Image load_image_for_model(const std::string& path, Dim input_size) {
  Image img = read_png_gray(path);
  if (img.h == input_size && img.w == input_size) return img;
  return resize_bilinear(img, input_size, input_size);
}

SplitAssignment split_participants(const std::vector<ExamRecord>& records, double train_frac,
                                   double val_frac, double test_frac, uint64_t seed) {
  require(std::abs(train_frac + val_frac + test_frac - 1.0) < 1e-9,
          "split: fractions must sum to 1");
  require(train_frac > 0 && val_frac > 0 && test_frac > 0, "split: fractions must be positive");

  // Unique participants in first-appearance order, then a seeded shuffle.
  std::vector<std::string> participants;
  std::set<std::string> seen;
  for (const auto& r : records)
    if (seen.insert(r.participant_id).second) participants.push_back(r.participant_id);
  require(participants.size() >= 3, "split: need at least 3 participants, got " +
                                        std::to_string(participants.size()));

  std::mt19937_64 rng = seeded_rng(seed, /*stream=*/0xdeca1);
  std::shuffle(participants.begin(), participants.end(), rng);

  const auto p = static_cast<double>(participants.size());
  auto n_train = static_cast<std::size_t>(std::llround(train_frac * p));
  auto n_val = static_cast<std::size_t>(std::llround(val_frac * p));
  // Keep every split nonempty even at extreme fractions.
  n_train = std::min(n_train, participants.size() - 2);
  if (n_train == 0) n_train = 1;
  if (n_val == 0) n_val = 1;
  n_val = std::min(n_val, participants.size() - n_train - 1);

  SplitAssignment out;
  for (std::size_t i = 0; i < participants.size(); ++i) {
    Split s = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    out.by_participant.emplace(participants[i], s);
  }
  return out;
}

std::vector<ExamRecord> records_in_split(const std::vector<ExamRecord>& records,
                                         const SplitAssignment& assignment, Split split,
                                         Feature feature, Dim* na_dropped) {
  std::vector<ExamRecord> out;
  Dim dropped = 0;
  for (const auto& r : records) {
    if (assignment.of(r) != split) continue;
    if (r.labels.of(feature) < 0) {
      ++dropped;
      continue;
    }
    out.push_back(r);
  }
  if (na_dropped) *na_dropped = dropped;
  return out;
}

}  // namespace m3
