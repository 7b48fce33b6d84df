#pragma once

// Experiment files: flat "key = value" lines grouped by [section] headers.
// [teacher] may repeat (one per teacher); other sections appear at most
// once. '#' and ';' start comments. Every problem found is reported, one
// "line N: section.key: message" diagnostic per line of the error.
//
//   name = blobs-demo
//   [dataset]    source = synth|file, path, label, delimiter, impute,
//                samples, classes, dim, spread, seed, test_fraction,
//                val_fraction, split_seed, noise, imbalance
//   [teacher]    hidden, lr, momentum, weight_decay, epochs, batch_size
//   [student]    hidden
//   [chain]      epsilon, max_intermediates, width_template, intermediate (repeatable)
//   [distill]    mode = auto|fixed, T0, alpha, lr, epochs, gamma, beta,
//                attention_hidden, entropy_sign = reward|literal,
//                per_sample_entropy, momentum, batch_size
//   [pipeline]   workers, seed, ablation, repetitions
//   [output]     dir, cache_dir, history_file

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hpmkd/data.hpp"
#include "hpmkd/errors.hpp"
#include "hpmkd/pipeline.hpp"

namespace hpmkd {

namespace detail {

struct Diagnostics {
  std::vector<std::string> lines;
  void add(int line, const std::string& field, const std::string& msg) {
    lines.push_back("line " + std::to_string(line) + ": " + field + ": " + msg);
  }
};

inline bool parse_uint(const std::string& v, std::uint64_t& out) {
  if (v.empty()) return false;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  return ec == std::errc() && p == v.data() + v.size();
}

inline bool parse_real(const std::string& v, double& out) {
  auto n = parse_number(v);
  if (!n) return false;
  out = *n;
  return true;
}

inline bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "yes" || v == "1" || v == "on") {
    out = true;
    return true;
  }
  if (v == "false" || v == "no" || v == "0" || v == "off") {
    out = false;
    return true;
  }
  return false;
}

inline bool parse_sizes(const std::string& v, std::vector<std::size_t>& out) {
  out.clear();
  for (const auto& item : split_line(v, ',')) {
    std::uint64_t x = 0;
    if (!parse_uint(item, x) || x == 0) return false;
    out.push_back(static_cast<std::size_t>(x));
  }
  return !out.empty();
}

inline bool parse_reals(const std::string& v, std::vector<double>& out) {
  out.clear();
  for (const auto& item : split_line(v, ',')) {
    double x = 0;
    if (!parse_real(item, x)) return false;
    out.push_back(x);
  }
  return !out.empty();
}

}  // namespace detail

inline Experiment parse_experiment(const std::string& text, const std::filesystem::path& base_dir = {}) {
  Experiment exp;
  detail::Diagnostics diag;
  std::string section;
  std::set<std::string> seen_sections;
  std::set<std::string> seen_keys;
  bool dataset_file = false, dataset_synth = false;
  bool distill_fixed = false;
  std::set<std::string> fixed_fields;
  DistillConfig fixed = default_config();
  int line_no = 0;

  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find_first_of("#;");
    std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        diag.add(line_no, line, "malformed section header");
        continue;
      }
      section = detail::trim(line.substr(1, line.size() - 2));
      static const std::set<std::string> known = {"dataset", "teacher", "student", "chain",
                                                  "distill", "pipeline", "output"};
      if (!known.contains(section)) {
        diag.add(line_no, section, "unknown section");
      } else if (section == "teacher") {
        exp.teachers.emplace_back();
      } else if (!seen_sections.insert(section).second) {
        diag.add(line_no, section, "section may appear only once");
      }
      seen_keys.clear();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      diag.add(line_no, section.empty() ? "?" : section, "expected key = value");
      continue;
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const std::string field = section.empty() ? key : section + "." + key;
    const bool repeatable = field == "chain.intermediate";
    if (!repeatable && !seen_keys.insert(key).second) {
      diag.add(line_no, field, "duplicate key");
      continue;
    }

    auto bad = [&](const std::string& what) { diag.add(line_no, field, what + " (got '" + value + "')"); };
    auto real = [&](double& out, double lo, double hi, const char* what) {
      double x = 0;
      if (!detail::parse_real(value, x) || !(x >= lo && x <= hi)) return bad(what);
      out = x;
    };
    auto count = [&](auto& out, std::uint64_t lo, const char* what) {
      std::uint64_t x = 0;
      if (!detail::parse_uint(value, x) || x < lo) return bad(what);
      out = static_cast<std::remove_reference_t<decltype(out)>>(x);
    };
    auto seed = [&](std::uint64_t& out) {
      if (!detail::parse_uint(value, out)) bad("expected a nonnegative integer");
    };
    auto flag = [&](bool& out) {
      if (!detail::parse_bool(value, out)) bad("expected true or false");
    };
    constexpr double inf = std::numeric_limits<double>::infinity();

    if (section.empty()) {
      if (key == "name") {
        if (value.empty()) bad("must be nonempty");
        exp.name = value;
      } else {
        diag.add(line_no, field, "unknown key");
      }
    } else if (section == "dataset") {
      auto& d = exp.dataset;
      if (key == "source") {
        if (value == "synth") {
          dataset_synth = true;
        } else if (value == "file") {
          dataset_file = true;
        } else {
          bad("expected synth or file");
        }
      } else if (key == "path") {
        if (value.empty()) bad("must be nonempty");
        std::filesystem::path p(value);
        d.path = p.is_absolute() || base_dir.empty() ? p : base_dir / p;
      } else if (key == "label") {
        if (value.empty()) bad("must be nonempty");
        d.label_column = value;
      } else if (key == "delimiter") {
        if (value == "tab" || value == "\\t") {
          d.delimiter = '\t';
        } else if (value.size() == 1) {
          d.delimiter = value[0];
        } else {
          bad("expected a single character or 'tab'");
        }
      } else if (key == "impute") {
        if (value == "median") {
          d.impute_median = true;
        } else if (value == "none") {
          d.impute_median = false;
        } else {
          bad("expected median or none");
        }
      } else if (key == "samples") {
        count(d.synth_samples, 2, "expected an integer >= 2");
      } else if (key == "classes") {
        count(d.synth_classes, 2, "expected an integer >= 2");
      } else if (key == "dim") {
        count(d.synth_dim, 1, "expected a positive integer");
      } else if (key == "spread") {
        real(d.synth_spread, 0.0, inf, "expected a nonnegative number");
      } else if (key == "seed") {
        seed(d.synth_seed);
      } else if (key == "test_fraction") {
        real(d.test_fraction, 1e-9, 1.0 - 1e-9, "expected a number in (0, 1)");
      } else if (key == "val_fraction") {
        real(d.val_fraction, 1e-9, 1.0 - 1e-9, "expected a number in (0, 1)");
      } else if (key == "split_seed") {
        seed(d.split_seed);
      } else if (key == "noise") {
        real(d.noise, 0.0, 1.0, "expected a rate in [0, 1]");
      } else if (key == "imbalance") {
        real(d.imbalance, 1.0, inf, "expected a ratio >= 1");
      } else {
        diag.add(line_no, field, "unknown key");
      }
    } else if (section == "teacher") {
      auto& t = exp.teachers.back();
      if (key == "hidden") {
        if (!detail::parse_sizes(value, t.hidden)) bad("expected comma-separated positive widths");
      } else if (key == "lr") {
        real(t.lr, 1e-12, inf, "expected a positive number");
      } else if (key == "momentum") {
        real(t.momentum, 0.0, 0.999999, "expected a number in [0, 1)");
      } else if (key == "weight_decay") {
        real(t.weight_decay, 0.0, inf, "expected a nonnegative number");
      } else if (key == "epochs") {
        count(t.epochs, 1, "expected a positive integer");
      } else if (key == "batch_size") {
        count(t.batch_size, 1, "expected a positive integer");
      } else {
        diag.add(line_no, field, "unknown key");
      }
    } else if (section == "student") {
      if (key == "hidden") {
        if (!detail::parse_sizes(value, exp.student_hidden)) bad("expected comma-separated positive widths");
      } else {
        diag.add(line_no, field, "unknown key");
      }
    } else if (section == "chain") {
      if (key == "epsilon") {
        if (value == "inf") {
          exp.epsilon = inf;
        } else {
          real(exp.epsilon, 0.0, inf, "expected a nonnegative number or inf");
        }
      } else if (key == "max_intermediates") {
        count(exp.max_intermediates, 0, "expected a nonnegative integer");
      } else if (key == "width_template") {
        if (!detail::parse_reals(value, exp.width_template)) bad("expected comma-separated positive ratios");
        for (double r : exp.width_template) {
          if (!(r > 0.0)) bad("ratios must be positive");
        }
      } else if (key == "intermediate") {
        std::vector<std::size_t> h;
        if (!detail::parse_sizes(value, h)) {
          bad("expected comma-separated positive widths");
        } else {
          exp.manual_intermediates.push_back(std::move(h));
        }
      } else {
        diag.add(line_no, field, "unknown key");
      }
    } else if (section == "distill") {
      if (key == "mode") {
        if (value == "fixed") {
          distill_fixed = true;
        } else if (value != "auto") {
          bad("expected auto or fixed");
        }
      } else if (key == "T0") {
        real(fixed.T0, 1e-12, inf, "expected a positive number");
        fixed_fields.insert(key);
      } else if (key == "alpha") {
        real(fixed.alpha, 0.0, 1.0, "expected a number in [0, 1]");
        fixed_fields.insert(key);
      } else if (key == "lr") {
        real(fixed.lr, 1e-12, inf, "expected a positive number");
        fixed_fields.insert(key);
      } else if (key == "epochs") {
        count(fixed.epochs, 1, "expected a positive integer");
        fixed_fields.insert(key);
      } else if (key == "gamma") {
        real(exp.gamma, 0.0, inf, "expected a nonnegative number");
      } else if (key == "beta") {
        real(exp.beta, 0.0, inf, "expected a nonnegative number");
      } else if (key == "attention_hidden") {
        count(exp.attention_hidden, 1, "expected a positive integer");
      } else if (key == "entropy_sign") {
        if (value == "reward") {
          exp.entropy_sign = EntropySign::Reward;
        } else if (value == "literal") {
          exp.entropy_sign = EntropySign::Literal;
        } else {
          bad("expected reward or literal");
        }
      } else if (key == "per_sample_entropy") {
        flag(exp.per_sample_entropy);
      } else if (key == "momentum") {
        real(exp.momentum, 0.0, 0.999999, "expected a number in [0, 1)");
      } else if (key == "batch_size") {
        count(exp.batch_size, 1, "expected a positive integer");
      } else {
        diag.add(line_no, field, "unknown key");
      }
    } else if (section == "pipeline") {
      if (key == "workers") {
        count(exp.pipeline.workers, 1, "expected a positive integer");
      } else if (key == "seed") {
        seed(exp.pipeline.master_seed);
      } else if (key == "ablation") {
        try {
          exp.pipeline.ablation = parse_ablation(value);
        } catch (const UsageError& e) {
          bad(e.what());
        }
      } else if (key == "repetitions") {
        count(exp.repetitions, 1, "expected a positive integer");
      } else {
        diag.add(line_no, field, "unknown key");
      }
    } else if (section == "output") {
      if (value.empty()) {
        bad("must be nonempty");
      } else if (key == "dir") {
        exp.output_dir = value;
      } else if (key == "cache_dir") {
        exp.cache_dir = value;
      } else if (key == "history_file") {
        exp.history_file = value;
      } else {
        diag.add(line_no, field, "unknown key");
      }
    }
  }

  if (dataset_file && dataset_synth) diag.add(line_no, "dataset.source", "exactly one dataset source is allowed");
  if (dataset_file && !exp.dataset.path) diag.add(line_no, "dataset.path", "required when source = file");
  if (!dataset_file && exp.dataset.path) diag.add(line_no, "dataset.source", "path given but source is not file");
  if (exp.teachers.empty()) diag.add(line_no, "teacher", "at least one [teacher] section is required");
  if (distill_fixed) {
    exp.distill_override = fixed;
  } else if (!fixed_fields.empty()) {
    diag.add(line_no, "distill.mode", "T0/alpha/lr/epochs are only used with mode = fixed");
  }
  if (!diag.lines.empty()) {
    std::string msg = "invalid experiment:";
    for (const auto& l : diag.lines) msg += "\n  " + l;
    throw ValidationError(msg);
  }
  return exp;
}

inline Experiment load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open experiment file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment(buf.str(), path.parent_path());
}

}  // namespace hpmkd
