#pragma once

// Content-addressed cache of trained models.
//
// Keys are SHA-256 digests of a canonical description of what was trained.
// Each entry is one "<digest>.entry" file:
//   32-byte header: "HPMKDCE1" | u32 version | u32 reserved | u64 metrics length | u64 model length
//   metrics block (canonical key=value text) | model container (see nn.hpp)
// Writes go to a temporary file that is renamed into place.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hpmkd/distill.hpp"
#include "hpmkd/errors.hpp"
#include "hpmkd/nn.hpp"
#include "hpmkd/sha256.hpp"

namespace hpmkd {

struct CacheKey {
  std::string digest;

  static CacheKey from_hex(std::string hex) {
    if (hex.size() != 64 || !std::all_of(hex.begin(), hex.end(), [](char c) {
          return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
        })) {
      throw InvalidInputError("cache key must be 64 lowercase hex characters");
    }
    return CacheKey{std::move(hex)};
  }

  bool operator==(const CacheKey&) const = default;
};

inline std::string join_sizes(std::span<const std::size_t> sizes) {
  std::string s;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(sizes[i]);
  }
  return s;
}

// "v1|dataset=<id>|arch=<sizes>|T0=%.6f|alpha=%.6f|lr=%.6f|epochs=<int>|seed=<int>"
inline std::string canonical_config_string(std::string_view dataset_id, std::span<const std::size_t> arch,
                                           const DistillConfig& config, std::uint64_t seed) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "|T0=%.6f|alpha=%.6f|lr=%.6f|epochs=%d|seed=%llu", config.T0, config.alpha,
                config.lr, config.epochs, static_cast<unsigned long long>(seed));
  return "v1|dataset=" + std::string(dataset_id) + "|arch=" + join_sizes(arch) + buf;
}

inline CacheKey config_hash(std::string_view dataset_id, std::span<const std::size_t> arch,
                            const DistillConfig& config, std::uint64_t seed) {
  if (dataset_id.empty()) throw InvalidInputError("dataset id must be nonempty");
  return CacheKey{sha256_hex(canonical_config_string(dataset_id, arch, config, seed))};
}

struct CacheMetrics {
  double accuracy = 0.0;
  double wall_time_seconds = 0.0;
  int epochs_run = 0;
};

struct CacheEntry {
  CacheKey key;
  std::string canonical;  // the string whose digest is `key`
  Model model;
  CacheMetrics metrics;
  std::int64_t created_at = 0;  // seconds since the Unix epoch
};

inline std::int64_t unix_now() {
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

struct CacheStats {
  std::size_t hits = 0;
  std::size_t lookups = 0;

  double hit_rate() const { return lookups ? static_cast<double>(hits) / static_cast<double>(lookups) : 0.0; }
};

namespace detail {

inline constexpr char kEntryMagic[8] = {'H', 'P', 'M', 'K', 'D', 'C', 'E', '1'};
inline constexpr std::uint32_t kEntryVersion = 1;

inline std::string encode_entry(const CacheEntry& e) {
  const std::string model = serialize_model(e.model);
  char buf[256];
  std::snprintf(buf, sizeof(buf), "accuracy=%.17g\nwall_time_seconds=%.17g\nepochs_run=%d\ncreated_at=%lld\n",
                e.metrics.accuracy, e.metrics.wall_time_seconds, e.metrics.epochs_run,
                static_cast<long long>(e.created_at));
  const std::string metrics =
      "key=" + e.key.digest + "\ncanonical=" + e.canonical + "\n" + buf + "model_sha256=" + sha256_hex(model) + "\n";
  std::string out(kEntryMagic, sizeof(kEntryMagic));
  put_u32(out, kEntryVersion);
  put_u32(out, 0);
  put_u64(out, metrics.size());
  put_u64(out, model.size());
  return out + metrics + model;
}

inline CacheEntry decode_entry(std::string_view bytes) {
  ByteReader in(bytes);
  if (in.take(8) != std::string_view(kEntryMagic, 8)) throw IntegrityError("bad cache entry magic");
  if (in.u32() != kEntryVersion) throw IntegrityError("unsupported cache entry version");
  in.u32();
  const auto metrics_len = in.u64();
  const auto model_len = in.u64();
  if (metrics_len > bytes.size() || model_len > bytes.size()) throw IntegrityError("cache entry lengths exceed file");
  const std::string metrics(in.take(static_cast<std::size_t>(metrics_len)));
  const std::string_view model = in.take(static_cast<std::size_t>(model_len));
  if (!in.done()) throw IntegrityError("trailing bytes in cache entry");

  std::map<std::string, std::string> kv;
  std::istringstream lines(metrics);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IntegrityError("malformed cache metrics line");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto field = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw IntegrityError(std::string("cache entry lacks ") + k);
    return it->second;
  };
  if (sha256_hex(model) != field("model_sha256")) throw IntegrityError("model bytes do not match their digest");
  CacheEntry e;
  e.key = CacheKey::from_hex(field("key"));
  e.canonical = field("canonical");
  if (sha256_hex(e.canonical) != e.key.digest) throw IntegrityError("entry key does not match its canonical form");
  try {
    e.metrics.accuracy = std::stod(field("accuracy"));
    e.metrics.wall_time_seconds = std::stod(field("wall_time_seconds"));
    e.metrics.epochs_run = std::stoi(field("epochs_run"));
    e.created_at = std::stoll(field("created_at"));
  } catch (const std::logic_error&) {
    throw IntegrityError("unparsable cache metrics");
  }
  e.model = deserialize_model(model);
  return e;
}

}  // namespace detail

// Directory-backed store. Safe to share between threads; one writer per key.
class CacheStore {
 public:
  explicit CacheStore(std::filesystem::path dir, std::uintmax_t max_bytes = 0)
      : dir_(std::move(dir)), max_bytes_(max_bytes) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec || !std::filesystem::is_directory(dir_)) throw StorageError("cannot create cache directory " + dir_.string());
  }

  std::optional<CacheEntry> get(const CacheKey& key) {
    const auto path = entry_path(key);
    std::optional<CacheEntry> found;
    std::string outcome = "miss";
    std::string bytes;
    if (read_file(path, bytes)) {
      try {
        auto e = detail::decode_entry(bytes);
        if (!(e.key == key)) throw IntegrityError("entry filed under the wrong key");
        found = std::move(e);
        outcome = "hit";
      } catch (const IntegrityError& err) {
        outcome = std::string("corrupt:") + err.what();
        std::error_code ec;
        std::filesystem::remove(path, ec);
      }
    }
    std::lock_guard lock(mu_);
    ++stats_.lookups;
    if (found) ++stats_.hits;
    log_locked("lookup " + key.digest + " " + outcome);
    return found;
  }

  void put(const CacheEntry& entry) {
    if (sha256_hex(entry.canonical) != entry.key.digest) {
      throw IntegrityError("cache entry key does not match the digest of its canonical form");
    }
    const std::string bytes = detail::encode_entry(entry);
    const auto path = entry_path(entry.key);
    std::lock_guard lock(mu_);
    const auto tmp = path.string() + ".tmp" + std::to_string(tmp_counter_++);
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())) || !out.flush()) {
        std::error_code ec;
        std::filesystem::remove(tmp, ec);
        throw StorageError("cannot write cache entry " + tmp);
      }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
      std::filesystem::remove(tmp, ec);
      throw StorageError("cannot move cache entry into place: " + path.string());
    }
    log_locked("put " + entry.key.digest);
    if (max_bytes_ > 0) evict_locked(path);
  }

  bool contains(const CacheKey& key) const { return std::filesystem::exists(entry_path(key)); }

  std::size_t entry_count() const {
    std::size_t n = 0;
    for (const auto& f : std::filesystem::directory_iterator(dir_)) {
      if (f.path().extension() == ".entry") ++n;
    }
    return n;
  }

  CacheStats stats() const {
    std::lock_guard lock(mu_);
    return stats_;
  }

  std::filesystem::path entry_path(const CacheKey& key) const { return dir_ / (key.digest + ".entry"); }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  static bool read_file(const std::filesystem::path& p, std::string& out) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return false;
    out.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return true;
  }

  void log_locked(const std::string& line) {
    std::ofstream log(dir_ / "stats.log", std::ios::app);
    log << line << '\n';
  }

  // Drops the oldest entries until the store fits in max_bytes_.
  void evict_locked(const std::filesystem::path& keep) {
    std::vector<std::pair<std::filesystem::file_time_type, std::filesystem::path>> files;
    std::uintmax_t total = 0;
    for (const auto& f : std::filesystem::directory_iterator(dir_)) {
      if (f.path().extension() != ".entry") continue;
      total += f.file_size();
      files.emplace_back(f.last_write_time(), f.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& [when, p] : files) {
      if (total <= max_bytes_) break;
      if (p == keep) continue;
      std::error_code ec;
      const auto sz = std::filesystem::file_size(p, ec);
      if (!ec && std::filesystem::remove(p, ec)) {
        total -= sz;
        log_locked("evict " + p.stem().string());
      }
    }
  }

  std::filesystem::path dir_;
  std::uintmax_t max_bytes_ = 0;
  CacheStats stats_;
  std::size_t tmp_counter_ = 0;
  mutable std::mutex mu_;
};

}  // namespace hpmkd
