#pragma once

// Data model for videos, clips and tubelets, plus JSON Lines I/O and
// validation. A video holds L clips, each clip M tubelets, each tubelet
// T per-frame boxes plus one visual feature vector.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "musle/common.hpp"
#include <json.hpp>

namespace musle {

struct Box {
  double cx = 0.5, cy = 0.5, w = 0.1, h = 0.1;

  bool valid() const {
    return std::isfinite(cx) && std::isfinite(cy) && std::isfinite(w) && std::isfinite(h) &&
           w > 0.0 && h > 0.0 && cx >= 0.0 && cx <= 1.0 && cy >= 0.0 && cy <= 1.0;
  }
};

struct Tubelet {
  int clip_index = 0;
  std::vector<Box> boxes;       // exactly T
  std::vector<double> visual;   // length D_vis
  double score = 0.0;           // detection score in [0,1]
};

struct VideoRecord {
  std::string video_id;
  int label = 0;
  std::vector<std::vector<Tubelet>> clips;  // L x M
};

struct DatasetMeta {
  int num_classes = 0;
  int L = 0;
  int T = 0;
  int M = 0;
  int D_vis = 0;

  bool operator==(const DatasetMeta&) const = default;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<VideoRecord> records;
};

struct ValidationIssue {
  int record_index = -1;  // -1: meta-level issue
  std::string location;
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;

  bool ok() const { return issues.empty(); }

  std::string summary(std::size_t max_items = 8) const {
    std::ostringstream os;
    os << issues.size() << " violation(s)";
    for (std::size_t i = 0; i < issues.size() && i < max_items; ++i) {
      const auto& e = issues[i];
      os << "\n  record " << e.record_index << " " << e.location << ": " << e.message;
    }
    return os.str();
  }
};

// Every invariant violation becomes a report entry; an empty report means
// the dataset is valid. Violations are data, not exceptions.
inline ValidationReport validate(const Dataset& ds) {
  ValidationReport rep;
  auto issue = [&rep](int rec, std::string loc, std::string msg) {
    rep.issues.push_back({rec, std::move(loc), std::move(msg)});
  };

  const auto& m = ds.meta;
  if (m.num_classes <= 0) issue(-1, "meta.num_classes", "must be positive");
  if (m.L <= 0) issue(-1, "meta.L", "must be positive");
  if (m.T <= 0) issue(-1, "meta.T", "must be positive");
  if (m.M <= 0) issue(-1, "meta.M", "must be positive");
  if (m.D_vis <= 0) issue(-1, "meta.D_vis", "must be positive");

  for (std::size_t r = 0; r < ds.records.size(); ++r) {
    const auto& rec = ds.records[r];
    const int ri = static_cast<int>(r);
    if (rec.label < 0 || rec.label >= m.num_classes) {
      issue(ri, "label", "label " + std::to_string(rec.label) + " outside [0," +
                             std::to_string(m.num_classes) + ")");
    }
    if (static_cast<int>(rec.clips.size()) != m.L) {
      issue(ri, "clips", "expected " + std::to_string(m.L) + " clips, got " +
                             std::to_string(rec.clips.size()));
      continue;
    }
    for (int l = 0; l < m.L; ++l) {
      const auto& clip = rec.clips[l];
      if (static_cast<int>(clip.size()) != m.M) {
        issue(ri, "clip " + std::to_string(l),
              "expected " + std::to_string(m.M) + " tubelets, got " + std::to_string(clip.size()));
        continue;
      }
      for (int t = 0; t < m.M; ++t) {
        const auto& tube = clip[t];
        const std::string loc = "clip " + std::to_string(l) + " tubelet " + std::to_string(t);
        if (tube.clip_index != l) {
          issue(ri, loc, "clip_index " + std::to_string(tube.clip_index) + " != container " +
                             std::to_string(l));
        }
        if (static_cast<int>(tube.boxes.size()) != m.T) {
          issue(ri, loc, "expected " + std::to_string(m.T) + " boxes, got " +
                             std::to_string(tube.boxes.size()));
        }
        for (std::size_t b = 0; b < tube.boxes.size(); ++b) {
          if (!tube.boxes[b].valid()) {
            issue(ri, loc + " box " + std::to_string(b),
                  "box invalid (needs finite values, w>0, h>0, cx,cy in [0,1])");
          }
        }
        if (static_cast<int>(tube.visual.size()) != m.D_vis) {
          issue(ri, loc, "expected visual length " + std::to_string(m.D_vis) + ", got " +
                             std::to_string(tube.visual.size()));
        } else if (!all_finite(tube.visual)) {
          issue(ri, loc, "visual feature contains non-finite value");
        }
        if (!std::isfinite(tube.score) || tube.score < 0.0 || tube.score > 1.0) {
          issue(ri, loc, "score must be in [0,1]");
        }
      }
    }
  }
  return rep;
}

namespace detail {

inline nlohmann::json box_to_json(const Box& b) {
  return nlohmann::json::array({b.cx, b.cy, b.w, b.h});
}

inline Box box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw DataError("box must be a 4-element array");
  Box b;
  b.cx = j[0].get<double>();
  b.cy = j[1].get<double>();
  b.w = j[2].get<double>();
  b.h = j[3].get<double>();
  return b;
}

}  // namespace detail

// File format (JSON Lines): first line is the meta object, then one video
// per line. Doubles round-trip exactly through the serializer.
inline void save_dataset(const Dataset& ds, const std::string& path) {
  const ValidationReport rep = validate(ds);
  if (!rep.ok()) {
    throw DataError("save_dataset: dataset invalid, refusing to write: " + rep.summary());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_dataset: cannot open '" + path + "' for writing");

  nlohmann::json meta{{"num_classes", ds.meta.num_classes}, {"L", ds.meta.L},
                      {"T", ds.meta.T},                     {"M", ds.meta.M},
                      {"D_vis", ds.meta.D_vis},             {"format_version", 1}};
  out << meta.dump() << '\n';

  for (const auto& rec : ds.records) {
    nlohmann::json jclips = nlohmann::json::array();
    for (const auto& clip : rec.clips) {
      nlohmann::json jclip = nlohmann::json::array();
      for (const auto& tube : clip) {
        nlohmann::json jboxes = nlohmann::json::array();
        for (const auto& b : tube.boxes) jboxes.push_back(detail::box_to_json(b));
        jclip.push_back(nlohmann::json{
            {"score", tube.score}, {"boxes", std::move(jboxes)}, {"feat", tube.visual}});
      }
      jclips.push_back(std::move(jclip));
    }
    nlohmann::json jrec{{"video_id", rec.video_id}, {"label", rec.label}, {"clips", std::move(jclips)}};
    out << jrec.dump() << '\n';
  }
  if (!out) throw DataError("save_dataset: write to '" + path + "' failed");
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_dataset: cannot open '" + path + "'");

  Dataset ds;
  std::string line;
  int line_no = 0;

  auto fail = [&](const std::string& what) {
    throw DataError("load_dataset: " + path + ":" + std::to_string(line_no) + ": " + what);
  };

  if (!std::getline(in, line)) throw DataError("load_dataset: '" + path + "' is empty");
  line_no = 1;
  try {
    const auto jmeta = nlohmann::json::parse(line);
    ds.meta.num_classes = jmeta.at("num_classes").get<int>();
    ds.meta.L = jmeta.at("L").get<int>();
    ds.meta.T = jmeta.at("T").get<int>();
    ds.meta.M = jmeta.at("M").get<int>();
    ds.meta.D_vis = jmeta.at("D_vis").get<int>();
    if (jmeta.at("format_version").get<int>() != 1) fail("unsupported format_version");
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad meta line: ") + e.what());
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      VideoRecord rec;
      rec.video_id = j.at("video_id").get<std::string>();
      rec.label = j.at("label").get<int>();
      const auto& jclips = j.at("clips");
      if (!jclips.is_array()) fail("'clips' must be an array");
      rec.clips.reserve(jclips.size());
      int li = 0;
      for (const auto& jclip : jclips) {
        std::vector<Tubelet> clip;
        clip.reserve(jclip.size());
        for (const auto& jtube : jclip) {
          Tubelet tube;
          tube.clip_index = li;
          tube.score = jtube.at("score").get<double>();
          for (const auto& jb : jtube.at("boxes")) tube.boxes.push_back(detail::box_from_json(jb));
          tube.visual = jtube.at("feat").get<std::vector<double>>();
          clip.push_back(std::move(tube));
        }
        rec.clips.push_back(std::move(clip));
        ++li;
      }
      ds.records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed record: ") + e.what());
    }
  }

  const ValidationReport rep = validate(ds);
  if (!rep.ok()) {
    throw DataError("load_dataset: '" + path + "' failed validation: " + rep.summary());
  }
  return ds;
}

inline bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (!(a.meta == b.meta) || a.records.size() != b.records.size()) return false;
  for (std::size_t r = 0; r < a.records.size(); ++r) {
    const auto& ra = a.records[r];
    const auto& rb = b.records[r];
    if (ra.video_id != rb.video_id || ra.label != rb.label || ra.clips.size() != rb.clips.size())
      return false;
    for (std::size_t l = 0; l < ra.clips.size(); ++l) {
      if (ra.clips[l].size() != rb.clips[l].size()) return false;
      for (std::size_t m = 0; m < ra.clips[l].size(); ++m) {
        const auto& ta = ra.clips[l][m];
        const auto& tb = rb.clips[l][m];
        if (ta.clip_index != tb.clip_index || ta.score != tb.score ||
            ta.visual != tb.visual || ta.boxes.size() != tb.boxes.size())
          return false;
        for (std::size_t i = 0; i < ta.boxes.size(); ++i) {
          const auto& ba = ta.boxes[i];
          const auto& bb = tb.boxes[i];
          if (ba.cx != bb.cx || ba.cy != bb.cy || ba.w != bb.w || ba.h != bb.h) return false;
        }
      }
    }
  }
  return true;
}

}  // namespace musle
