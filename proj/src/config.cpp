#include "mdunet/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mdunet {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError("cannot parse '" + std::string(v) + "'");
  return out;
}

template <typename T>
std::vector<T> parse_list(std::string_view v) {
  std::vector<T> out;
  if (trim(v).empty()) return out;
  while (true) {
    const auto comma = v.find(',');
    out.push_back(parse_number<T>(trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + std::string(v) + "'");
}

DenseSetting parse_dense(std::string_view v, std::string_view multi_word) {
  if (v == multi_word) return DenseSetting::multi_scale();
  return DenseSetting::of(parse_number<int>(v));
}

using Setter = std::function<void(RunConfig&, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"depth", [](RunConfig& c, std::string_view v) { c.arch.depth = parse_number<int>(v); }},
      {"base_channels", [](RunConfig& c, std::string_view v) { c.arch.base_channels = parse_number<std::int64_t>(v); }},
      {"num_classes", [](RunConfig& c, std::string_view v) { c.arch.num_classes = parse_number<std::int64_t>(v); }},
      {"input_channels",
       [](RunConfig& c, std::string_view v) { c.arch.input_channels = parse_number<std::int64_t>(v); }},
      {"enc_dense", [](RunConfig& c, std::string_view v) { c.arch.enc_dense = parse_dense(v, "min"); }},
      {"dec_dense", [](RunConfig& c, std::string_view v) { c.arch.dec_dense = parse_dense(v, "mout"); }},
      {"cross_mode",
       [](RunConfig& c, std::string_view v) {
         const auto m = parse_cross_mode(v);
         if (!m) throw ConfigError("unknown cross_mode '" + std::string(v) + "'");
         c.arch.cross_mode = *m;
       }},
      {"upsample_mode",
       [](RunConfig& c, std::string_view v) {
         const auto m = parse_upsample_mode(v);
         if (!m) throw ConfigError("unknown upsample_mode '" + std::string(v) + "'");
         c.arch.upsample_mode = *m;
       }},
      {"seed",
       [](RunConfig& c, std::string_view v) {
         c.seed = parse_number<std::uint64_t>(v);
         c.train.seed = c.seed;
       }},
      {"base_lr", [](RunConfig& c, std::string_view v) { c.train.base_lr = parse_number<double>(v); }},
      {"lr_milestones",
       [](RunConfig& c, std::string_view v) { c.train.lr_milestones = parse_list<std::int64_t>(v); }},
      {"batch_size", [](RunConfig& c, std::string_view v) { c.train.batch_size = parse_number<std::int64_t>(v); }},
      {"epochs", [](RunConfig& c, std::string_view v) { c.train.epochs = parse_number<std::int64_t>(v); }},
      {"max_iterations",
       [](RunConfig& c, std::string_view v) { c.train.max_iterations = parse_number<std::int64_t>(v); }},
      {"quant_bits", [](RunConfig& c, std::string_view v) { c.quant.bits = parse_number<int>(v); }},
      {"quant_schedule", [](RunConfig& c, std::string_view v) { c.quant.schedule = parse_list<double>(v); }},
      {"retrain_iterations",
       [](RunConfig& c, std::string_view v) { c.quant.retrain_iterations = parse_number<std::int64_t>(v); }},
      {"skip_batch_norm", [](RunConfig& c, std::string_view v) { c.quant.skip_batch_norm = parse_bool(v); }},
      {"quant_stop_after", [](RunConfig& c, std::string_view v) { c.quant.stop_after = parse_number<double>(v); }},
      {"synthetic_count",
       [](RunConfig& c, std::string_view v) { c.synthetic.count = parse_number<std::int64_t>(v); }},
      {"synthetic_test_count",
       [](RunConfig& c, std::string_view v) { c.synthetic_test_count = parse_number<std::int64_t>(v); }},
      {"synthetic_size", [](RunConfig& c, std::string_view v) { c.synthetic.size = parse_number<std::int64_t>(v); }},
      {"synthetic_max_shapes",
       [](RunConfig& c, std::string_view v) { c.synthetic.max_shapes = parse_number<int>(v); }},
      {"synthetic_noise", [](RunConfig& c, std::string_view v) { c.synthetic.noise = parse_number<double>(v); }},
      {"synthetic_seed",
       [](RunConfig& c, std::string_view v) { c.synthetic.seed = parse_number<std::uint64_t>(v); }},
  };
  return table;
}

}  // namespace

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::map<std::string, int, std::less<>> seen;
  int line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(where + "unknown key '" + std::string(key) + "'");
    if (const auto prev = seen.find(key); prev != seen.end()) {
      throw ConfigError(where + "duplicate key '" + std::string(key) + "' (first set on line " +
                        std::to_string(prev->second) + ")");
    }
    seen.emplace(std::string(key), line_no);
    try {
      it->second(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + std::string(key) + ": " + e.what());
    }
  }
  // Invariants are checked once all keys are known, since some depend on
  // each other (a dense degree is bounded by the depth). Messages start with
  // the offending field, which locates the line.
  auto check = [&](const auto& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      const std::string msg = e.what();
      for (const auto& [key, line] : seen) {
        if (msg.starts_with(key + " ") || msg.starts_with(key + ":")) {
          throw ConfigError("line " + std::to_string(line) + ": " + msg);
        }
      }
      throw ConfigError(msg);
    }
  };
  check([&] { cfg.arch.validate(); });
  check([&] { cfg.train.validate(); });
  check([&] { cfg.quant.validate(); });
  check([&] { cfg.synthetic.validate(); });
  check([&] {
    if (cfg.synthetic_test_count < 1) throw ConfigError("synthetic_test_count must be at least 1");
  });
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace mdunet
