#pragma once

#include "m3/image.hpp"

#include <map>
#include <string>
#include <vector>

namespace m3 {

enum class Feature { rpd, ga, pigment };

const char* feature_name(Feature f);
Feature parse_feature(const std::string& name);

// Per-feature labels; -1 encodes NA (record excluded from that feature's runs).
struct Labels {
  int rpd = -1, ga = -1, pigment = -1;
  int of(Feature f) const {
    switch (f) {
      case Feature::rpd: return rpd;
      case Feature::ga: return ga;
      default: return pigment;
    }
  }
};

// One CFP-FAF pair: the dataset unit.
struct ExamRecord {
  std::string participant_id;
  std::string eye;    // "left" | "right"
  std::string visit;  // free-form visit tag
  std::string cfp_path, faf_path;
  Labels labels;

  std::string record_id() const { return participant_id + "_" + eye + "_" + visit; }
};

enum class Split { train, val, test };

const char* split_name(Split s);

struct SplitAssignment {
  std::map<std::string, Split> by_participant;

  Split of(const ExamRecord& r) const;
  Dim count(Split s) const;
};

// Manifest CSV: header `participant_id,eye,visit,cfp_path,faf_path,rpd,ga,pigment`,
// labels 0/1/NA (empty equals NA). Relative image paths resolve against the
// manifest's directory. Duplicate (participant,eye,visit) keys, malformed
// labels, and missing image files are hard errors naming the offending row.
std::vector<ExamRecord> load_manifest(const std::string& csv_path);

// Writes records in the manifest format (paths emitted as stored).
void save_manifest(const std::string& csv_path, const std::vector<ExamRecord>& records);

// Decode a PNG, map to [0,1] grayscale, bilinear-resize to input_size.
Image load_image_for_model(const std::string& path, Dim input_size);

// Random participant-level partition. Sizes match the rounded fraction
// targets within one participant; all records of a participant land in one
// split. Fractions must sum to 1; fewer than 3 participants is an error.
SplitAssignment split_participants(const std::vector<ExamRecord>& records, double train_frac,
                                   double val_frac, double test_frac, uint64_t seed);

// Records of `records` whose participant landed in `split`, keeping manifest
// order; records with an NA label for `feature` are dropped (count reported
// via na_dropped when non-null).
std::vector<ExamRecord> records_in_split(const std::vector<ExamRecord>& records,
                                         const SplitAssignment& assignment, Split split,
                                         Feature feature, Dim* na_dropped = nullptr);

}  // namespace m3
