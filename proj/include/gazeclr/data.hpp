#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gazeclr/augment.hpp"
#include "gazeclr/errors.hpp"
#include "gazeclr/geometry.hpp"
#include "gazeclr/image.hpp"

namespace gazeclr {

namespace fs = std::filesystem;

/// One manifest line: a single camera frame.
struct ManifestRecord {
  std::string participant;
  std::int64_t timestamp = 0;
  std::string view;
  std::string image_path;  // relative to the manifest directory
  Mat3 rot = Mat3::Identity();   // camera -> screen
  Mat3 norm = Mat3::Identity();  // camera -> normalized camera
  std::optional<Vec3> gaze;      // normalized-camera frame
  std::optional<std::array<double, 2>> pog;
};

/// All views of one participant at one timestamp.
struct FrameGroup {
  std::string participant;
  std::int64_t timestamp = 0;
  std::vector<std::size_t> records;             // indexed like DatasetManifest::views
  std::vector<RotationMatrix> effective;        // normalized camera -> screen, per view
};

struct DatasetManifest {
  fs::path root;
  std::vector<ManifestRecord> records;
  std::vector<std::string> views;
  std::vector<FrameGroup> groups;  // sorted by (participant, timestamp)

  std::vector<std::string> participants() const {
    std::vector<std::string> out;
    for (const auto& g : groups) {
      if (out.empty() || out.back() != g.participant) out.push_back(g.participant);
    }
    return out;
  }

  const ManifestRecord& record(const FrameGroup& g, std::size_t view) const { return records.at(g.records.at(view)); }

  /// Group indices per participant, in timestamp order.
  std::map<std::string, std::vector<std::size_t>> groups_by_participant() const {
    std::map<std::string, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < groups.size(); ++i) out[groups[i].participant].push_back(i);
    return out;
  }

  /// Restriction to the given participants (records are copied).
  DatasetManifest subset(const std::vector<std::string>& keep) const;
};

struct ManifestOptions {
  /// Required view set; empty means the union of views found in the file.
  std::vector<std::string> views;
};

namespace detail {

inline Mat3 mat3_from_json(const nlohmann::json& j, const std::string& what, std::size_t line) {
  if (!j.is_array() || j.size() != 9) throw ParseError("manifest", line, what + " must hold 9 numbers");
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(static_cast<std::size_t>(3 * r + c)).get<double>();
  return m;
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string json_string(const std::string& s) { return nlohmann::json(s).dump(); }

inline void group_records(DatasetManifest& m, const ManifestOptions& opts) {
  if (opts.views.empty()) {
    std::vector<std::string> seen;
    for (const auto& r : m.records) {
      if (std::find(seen.begin(), seen.end(), r.view) == seen.end()) seen.push_back(r.view);
    }
    std::sort(seen.begin(), seen.end());
    m.views = seen;
  } else {
    m.views = opts.views;
  }
  std::map<std::pair<std::string, std::int64_t>, std::vector<std::size_t>> by_key;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    by_key[{m.records[i].participant, m.records[i].timestamp}].push_back(i);
  }
  m.groups.clear();
  for (const auto& [key, idx] : by_key) {
    FrameGroup g;
    g.participant = key.first;
    g.timestamp = key.second;
    g.records.assign(m.views.size(), SIZE_MAX);
    for (std::size_t i : idx) {
      const auto it = std::find(m.views.begin(), m.views.end(), m.records[i].view);
      if (it == m.views.end()) {
        throw DataError("record for participant '" + key.first + "' uses unknown view '" + m.records[i].view + "'");
      }
      auto& slot = g.records[static_cast<std::size_t>(it - m.views.begin())];
      if (slot != SIZE_MAX) {
        throw DataError("duplicate view '" + *it + "' for participant '" + key.first + "' at timestamp " +
                        std::to_string(key.second));
      }
      slot = i;
    }
    for (std::size_t v = 0; v < m.views.size(); ++v) {
      if (g.records[v] == SIZE_MAX) {
        throw IncompleteGroupError("participant '" + key.first + "' timestamp " + std::to_string(key.second) +
                                   " is missing view '" + m.views[v] + "' (" + std::to_string(idx.size()) + " of " +
                                   std::to_string(m.views.size()) + " views present)");
      }
      const auto& r = m.records[g.records[v]];
      const RotationMatrix rot(r.rot, "camera:" + r.view, "screen");
      const RotationMatrix norm(r.norm, "camera:" + r.view, "normalized:" + r.view);
      g.effective.push_back(effective_rotation(rot, norm));
    }
    m.groups.push_back(std::move(g));
  }
}

}  // namespace detail

inline DatasetManifest DatasetManifest::subset(const std::vector<std::string>& keep) const {
  DatasetManifest out;
  out.root = root;
  for (const auto& r : records) {
    if (std::find(keep.begin(), keep.end(), r.participant) != keep.end()) out.records.push_back(r);
  }
  detail::group_records(out, ManifestOptions{views});
  return out;
}

/// Parses and validates a JSONL manifest. Rotation matrices are checked and the
/// per-view effective rotations are composed here; images are read lazily.
inline DatasetManifest load_manifest(const fs::path& path, const ManifestOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
    ManifestRecord r;
    try {
      r.participant = j.at("participant").get<std::string>();
      r.timestamp = j.at("timestamp").get<std::int64_t>();
      r.view = j.at("view").get<std::string>();
      r.image_path = j.at("image_path").get<std::string>();
      r.rot = detail::mat3_from_json(j.at("rot"), "rot", lineno);
      r.norm = detail::mat3_from_json(j.at("norm"), "norm", lineno);
      if (j.contains("gaze") && !j["gaze"].is_null()) {
        const auto& g = j["gaze"];
        if (!g.is_array() || g.size() != 3) throw ParseError(path.string(), lineno, "gaze must hold 3 numbers");
        r.gaze = Vec3(g[0].get<double>(), g[1].get<double>(), g[2].get<double>());
      }
      if (j.contains("pog") && !j["pog"].is_null()) {
        const auto& p = j["pog"];
        if (!p.is_array() || p.size() != 2) throw ParseError(path.string(), lineno, "pog must hold 2 numbers");
        r.pog = std::array<double, 2>{p[0].get<double>(), p[1].get<double>()};
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
    try {
      RotationMatrix check_rot(r.rot);
      RotationMatrix check_norm(r.norm);
    } catch (const InvariantViolation& e) {
      throw InvariantViolation(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    m.records.push_back(std::move(r));
  }
  detail::group_records(m, opts);
  return m;
}

/// Writes one JSON object per record with 17-significant-digit floats.
inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest '" + path.string() + "'");
  auto numbers = [](const auto& values) {
    std::string s = "[";
    bool first = true;
    for (double v : values) {
      if (!first) s += ",";
      s += detail::fmt17(v);
      first = false;
    }
    return s + "]";
  };
  auto flat = [](const Mat3& a) {
    std::array<double, 9> v{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(3 * r + c)] = a(r, c);
    return v;
  };
  for (const auto& r : m.records) {
    out << "{\"participant\":" << detail::json_string(r.participant) << ",\"timestamp\":" << r.timestamp
        << ",\"view\":" << detail::json_string(r.view) << ",\"image_path\":" << detail::json_string(r.image_path)
        << ",\"rot\":" << numbers(flat(r.rot)) << ",\"norm\":" << numbers(flat(r.norm));
    if (r.gaze) out << ",\"gaze\":" << numbers(std::array<double, 3>{r.gaze->x(), r.gaze->y(), r.gaze->z()});
    if (r.pog) out << ",\"pog\":" << numbers(*r.pog);
    out << "}\n";
  }
  if (!out) throw DataError("failed writing manifest '" + path.string() + "'");
}

/// Reads images on first use and keeps them in memory as 8-bit data.
class ImageStore {
 public:
  explicit ImageStore(fs::path root) : root_(std::move(root)) {}

  Image get(const std::string& relative_path) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = cache_.find(relative_path);
    if (it == cache_.end()) it = cache_.emplace(relative_path, read_png(root_ / relative_path)).first;
    return it->second.to_float();
  }

  /// Inserts an in-memory image (used by generators and tests).
  void put(const std::string& relative_path, ImageU8 img) {
    std::lock_guard<std::mutex> lock(mutex_);
    cache_[relative_path] = std::move(img);
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return cache_.size();
  }

 private:
  fs::path root_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, ImageU8> cache_;
};

struct ViewRecord {
  std::string view_id;
  Image image;
  RotationMatrix effective_rotation;
  std::optional<GazeDirection> gaze_label;
  std::optional<std::array<double, 2>> pog;
};

struct MultiViewSample {
  std::string participant_id;
  std::int64_t timestamp = 0;
  std::vector<ViewRecord> views;
};

/// Materializes a group. `input_size` > 0 enforces square images of that side.
inline MultiViewSample load_sample(const DatasetManifest& m, const FrameGroup& g, ImageStore& store,
                                   int input_size = 0) {
  MultiViewSample s;
  s.participant_id = g.participant;
  s.timestamp = g.timestamp;
  for (std::size_t v = 0; v < m.views.size(); ++v) {
    const auto& r = m.record(g, v);
    ViewRecord vr;
    vr.view_id = r.view;
    vr.image = store.get(r.image_path);
    if (input_size > 0 && (vr.image.height != input_size || vr.image.width != input_size)) {
      throw DataError("image '" + r.image_path + "' is " + std::to_string(vr.image.width) + "x" +
                      std::to_string(vr.image.height) + ", expected " + std::to_string(input_size) + "x" +
                      std::to_string(input_size));
    }
    vr.effective_rotation = g.effective[v];
    if (r.gaze) vr.gaze_label = GazeDirection::normalized(*r.gaze, g.effective[v].from_frame());
    vr.pog = r.pog;
    s.views.push_back(std::move(vr));
  }
  return s;
}

/// Largest cross-view label discrepancy (degrees) in the group.
inline double group_consistency(const DatasetManifest& m, const FrameGroup& g) {
  std::vector<LabeledView> lv;
  for (std::size_t v = 0; v < m.views.size(); ++v) {
    const auto& r = m.record(g, v);
    if (!r.gaze) throw MissingLabelError("group without gaze labels");
    lv.push_back({g.effective[v], GazeDirection::normalized(*r.gaze)});
  }
  return check_multiview_consistency(lv);
}

struct SingleViewPair {
  Image first;
  Image second;
  std::string view_id;
};

struct MultiViewPair {
  Image first;
  Image second;
  std::string view_i;
  std::string view_j;
};

/// Two independent augmentations of each view's image.
inline std::vector<SingleViewPair> make_single_view_pairs(const MultiViewSample& s, const AugmentationConfig& cfg,
                                                          Rng& rng) {
  std::vector<SingleViewPair> out;
  for (const auto& v : s.views) {
    Image a = augment(v.image, cfg, rng);
    Image b = augment(v.image, cfg, rng);
    out.push_back({std::move(a), std::move(b), v.view_id});
  }
  return out;
}

/// Every ordered pair (i, j), i != j, of views, each image independently augmented.
inline std::vector<MultiViewPair> make_multi_view_pairs(const MultiViewSample& s, const AugmentationConfig& cfg,
                                                        Rng& rng) {
  if (s.views.size() < 2) {
    throw InsufficientViewsError("multi-view pairs need at least 2 views, sample has " +
                                 std::to_string(s.views.size()));
  }
  std::vector<MultiViewPair> out;
  for (std::size_t i = 0; i < s.views.size(); ++i) {
    for (std::size_t j = 0; j < s.views.size(); ++j) {
      if (i == j) continue;
      Image a = augment(s.views[i].image, cfg, rng);
      Image b = augment(s.views[j].image, cfg, rng);
      out.push_back({std::move(a), std::move(b), s.views[i].view_id, s.views[j].view_id});
    }
  }
  return out;
}

struct BatchStreamSummary {
  std::size_t batches_per_epoch = 0;
  std::size_t skipped_participants = 0;
  std::vector<std::string> skipped;
};

/// Endless, epoch-based stream of group-index batches.
///
/// Single-participant mode: each participant's groups are shuffled and cut
/// into batches of B (remainder dropped); the batches of all participants are
/// then shuffled together. Participants with fewer than B groups are skipped.
/// Multi-participant mode shuffles all groups jointly.
class BatchStream {
 public:
  BatchStream(const DatasetManifest& m, std::size_t batch_size, std::uint64_t seed, bool multi_participant = false)
      : batch_size_(batch_size), seed_(seed), multi_(multi_participant) {
    if (batch_size == 0) throw InvalidArgument("batch size must be positive");
    for (auto& [p, idx] : m.groups_by_participant()) {
      if (!multi_ && idx.size() < batch_size) {
        summary_.skipped.push_back(p);
        continue;
      }
      pools_.push_back(idx);
    }
    summary_.skipped_participants = summary_.skipped.size();
    if (multi_) {
      std::size_t total = 0;
      for (const auto& p : pools_) total += p.size();
      summary_.batches_per_epoch = total / batch_size;
    } else {
      for (const auto& p : pools_) summary_.batches_per_epoch += p.size() / batch_size;
    }
  }

  const BatchStreamSummary& summary() const noexcept { return summary_; }
  bool empty() const noexcept { return summary_.batches_per_epoch == 0; }
  std::size_t epoch() const noexcept { return epoch_; }

  /// Batches of one full epoch, deterministic in (seed, epoch).
  std::vector<std::vector<std::size_t>> epoch_batches(std::size_t epoch) const {
    Rng rng(seed_ ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
    std::vector<std::vector<std::size_t>> batches;
    if (multi_) {
      std::vector<std::size_t> all;
      for (const auto& p : pools_) all.insert(all.end(), p.begin(), p.end());
      std::shuffle(all.begin(), all.end(), rng);
      for (std::size_t i = 0; i + batch_size_ <= all.size(); i += batch_size_) {
        batches.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(i),
                             all.begin() + static_cast<std::ptrdiff_t>(i + batch_size_));
      }
      return batches;
    }
    for (auto pool : pools_) {
      std::shuffle(pool.begin(), pool.end(), rng);
      for (std::size_t i = 0; i + batch_size_ <= pool.size(); i += batch_size_) {
        batches.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(i),
                             pool.begin() + static_cast<std::ptrdiff_t>(i + batch_size_));
      }
    }
    std::shuffle(batches.begin(), batches.end(), rng);
    return batches;
  }

  /// Next batch; rolls over into a freshly shuffled epoch when exhausted.
  std::vector<std::size_t> next() {
    if (empty()) throw EmptyBatchError("batch stream is empty (no participant has enough groups)");
    if (cursor_ >= current_.size()) {
      if (started_) ++epoch_;
      started_ = true;
      current_ = epoch_batches(epoch_);
      cursor_ = 0;
    }
    return current_[cursor_++];
  }

 private:
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool multi_;
  std::vector<std::vector<std::size_t>> pools_;
  BatchStreamSummary summary_;
  std::vector<std::vector<std::size_t>> current_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  bool started_ = false;
};

}  // namespace gazeclr
