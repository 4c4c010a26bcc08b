#include "config.hpp"

#include <algorithm>
#include <climits>
#include <cstdio>
#include <functional>
#include <fstream>
#include <sstream>

namespace fedlora {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

long parse_long(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const long out = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

int parse_int(const std::string& key, const std::string& v) {
  const long out = parse_long(key, v);
  if (out < INT_MIN || out > INT_MAX) throw ConfigError(key + ": integer out of range");
  return static_cast<int>(out);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (v.empty()) return out;
  size_t start = 0;
  for (size_t i = 0; i <= v.size(); ++i) {
    if (i == v.size() || v[i] == ';') {
      out.push_back(v.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& tok : split_list(v)) out.push_back(parse_int(key, tok));
  return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& tok : split_list(v)) out.push_back(parse_double(key, tok));
  return out;
}

template <typename T>
std::string join_list(const std::vector<T>& v, std::string (*fmt)(T)) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ";";
    out += fmt(v[i]);
  }
  return out;
}

struct KeyEntry {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

const std::vector<KeyEntry>& key_table() {
  static const std::vector<KeyEntry> table = [] {
    std::vector<KeyEntry> t;
    auto add = [&](const std::string& key, auto getter, auto setter) {
      t.push_back({key, getter, setter});
    };
    auto add_int = [&](const std::string& key, auto member) {
      add(
          key, [member](const ExperimentConfig& c) { return std::to_string(member(c)); },
          [member, key](ExperimentConfig& c, const std::string& v) {
            member(c) = parse_int(key, v);
          });
    };
    auto add_long = [&](const std::string& key, auto member) {
      add(
          key, [member](const ExperimentConfig& c) { return std::to_string(member(c)); },
          [member, key](ExperimentConfig& c, const std::string& v) {
            member(c) = parse_long(key, v);
          });
    };
    auto add_double = [&](const std::string& key, auto member) {
      add(
          key, [member](const ExperimentConfig& c) { return format_double(member(c)); },
          [member, key](ExperimentConfig& c, const std::string& v) {
            member(c) = parse_double(key, v);
          });
    };
    auto add_bool = [&](const std::string& key, auto member) {
      add(
          key,
          [member](const ExperimentConfig& c) { return member(c) ? std::string("true") : "false"; },
          [member, key](ExperimentConfig& c, const std::string& v) {
            member(c) = parse_bool(key, v);
          });
    };
    auto add_string = [&](const std::string& key, auto member) {
      add(
          key, [member](const ExperimentConfig& c) { return member(c); },
          [member](ExperimentConfig& c, const std::string& v) { member(c) = v; });
    };

#define FIELD(expr) [](auto& c) -> auto& { return c.expr; }
    add_string("experiment.name", FIELD(name));

    add("model.backbone",
        [](const ExperimentConfig& c) {
          return c.model.backbone == Backbone::kTinyTransformer ? std::string("transformer") : "mlp";
        },
        [](ExperimentConfig& c, const std::string& v) {
          if (v == "transformer")
            c.model.backbone = Backbone::kTinyTransformer;
          else if (v == "mlp")
            c.model.backbone = Backbone::kMlp;
          else
            throw ConfigError("model.backbone: expected transformer or mlp, got '" + v + "'");
        });
    add_int("model.image_h", FIELD(model.image_h));
    add_int("model.image_w", FIELD(model.image_w));
    add_int("model.channels", FIELD(model.channels));
    add_int("model.patch", FIELD(model.patch));
    add_int("model.dim", FIELD(model.dim));
    add_int("model.heads", FIELD(model.heads));
    add_int("model.blocks", FIELD(model.blocks));
    add_int("model.mlp_ratio", FIELD(model.mlp_ratio));
    add("model.mlp_hidden",
        [](const ExperimentConfig& c) {
          return join_list<int>(c.model.mlp_hidden, [](int x) { return std::to_string(x); });
        },
        [](ExperimentConfig& c, const std::string& v) {
          c.model.mlp_hidden = parse_int_list("model.mlp_hidden", v);
        });
    add_int("model.classes", FIELD(model.classes));
    add_bool("model.train_head", FIELD(model.train_head));
    add_bool("model.train_layernorm", FIELD(model.train_layernorm));

    add_int("data.train_per_class", FIELD(synth.per_class));
    add_int("data.test_per_class", FIELD(test_per_class));
    add_double("data.noise", FIELD(synth.noise));
    add_double("data.strength", FIELD(synth.strength));

    add_int("pretrain.epochs", FIELD(pretrain.epochs));
    add_double("pretrain.lr", FIELD(pretrain.lr));
    add_int("pretrain.batch_size", FIELD(pretrain.batch_size));
    add_double("pretrain.accuracy_floor", FIELD(pretrain.accuracy_floor));
    add_int("pretrain.per_class", FIELD(pretrain.per_class));
    add_int("pretrain.val_per_class", FIELD(pretrain.val_per_class));
    add_string("pretrain.cache_dir", FIELD(pretrain_cache_dir));

    add_bool("lora.enabled", FIELD(lora.enabled));
    add_int("lora.rank", FIELD(lora.rank));
    add_string("lora.targets", FIELD(lora.targets));
    add_string("lora.init", FIELD(lora.init));

    add_int("trigger.row", FIELD(trigger.row));
    add_int("trigger.col", FIELD(trigger.col));
    add_int("trigger.height", FIELD(trigger.height));
    add_int("trigger.width", FIELD(trigger.width));
    add("trigger.color",
        [](const ExperimentConfig& c) {
          return join_list<double>(c.trigger.color, [](double x) { return format_double(x); });
        },
        [](ExperimentConfig& c, const std::string& v) {
          c.trigger.color = parse_double_list("trigger.color", v);
        });
    add_int("trigger.target", FIELD(trigger.target));

    add("attack.kind",
        [](const ExperimentConfig& c) { return to_string(c.attack.kind); },
        [](ExperimentConfig& c, const std::string& v) { c.attack.kind = attack_id_from_string(v); });
    add_double("attack.poison_ratio", FIELD(attack.poison_ratio));
    add_double("attack.mask_share", FIELD(attack.mask_share));
    add_double("attack.a3fl_alpha", FIELD(attack.a3fl_alpha));
    add_int("attack.a3fl_trigger_steps", FIELD(attack.a3fl_trigger_steps));
    add_double("attack.a3fl_trigger_lr", FIELD(attack.a3fl_trigger_lr));
    add_int("attack.a3fl_adv_steps", FIELD(attack.a3fl_adv_steps));
    add_double("attack.a3fl_adv_lr", FIELD(attack.a3fl_adv_lr));

    add_int("federation.clients", FIELD(fed.clients));
    add_int("federation.sample_per_round", FIELD(fed.sample_per_round));
    add_long("federation.rounds", FIELD(fed.rounds));
    add_int("federation.local_epochs", FIELD(fed.local_epochs));
    add_double("federation.local_lr", FIELD(fed.local_lr));
    add_int("federation.batch_size", FIELD(fed.batch_size));
    add_double("federation.server_lr", FIELD(fed.server_lr));
    add_double("federation.clip_tau", FIELD(fed.clip_tau));
    add("federation.attackers",
        [](const ExperimentConfig& c) {
          return join_list<int>(c.fed.attacker_ids, [](int x) { return std::to_string(x); });
        },
        [](ExperimentConfig& c, const std::string& v) {
          c.fed.attacker_ids = parse_int_list("federation.attackers", v);
        });
    add_long("federation.window_start", FIELD(fed.window_start));
    add_long("federation.window_end", FIELD(fed.window_end));
    add_double("federation.partition_alpha", FIELD(fed.partition_alpha));
    add_double("federation.partition_lo", FIELD(fed.partition_lo));
    add_double("federation.partition_hi", FIELD(fed.partition_hi));

    add_bool("reset.enabled", FIELD(reset.enabled));
    add_int("reset.period", FIELD(reset.period));
    add_double("reset.fraction", FIELD(reset.fraction));
    add_long("reset.cooldown", FIELD(reset.cooldown));

    add_int("eval.dense_until", FIELD(eval.dense_until));
    add_int("eval.period", FIELD(eval.period));
    add_int("eval.sigma_period", FIELD(eval.sigma_period));
    add_int("eval.sigma_lag", FIELD(eval.sigma_lag));
#undef FIELD
    return t;
  }();
  return table;
}

const KeyEntry* find_key(const std::string& key) {
  for (const auto& e : key_table())
    if (e.key == key) return &e;
  return nullptr;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const KeyEntry* e = find_key(key);
  if (!e) throw ConfigError("unknown config key '" + key + "'");
  e->set(cfg, value);
  // The synthetic dataset has no shape keys of its own; it always follows the
  // model geometry.
  cfg.synth.classes = cfg.model.classes;
  cfg.synth.image_h = cfg.model.image_h;
  cfg.synth.image_w = cfg.model.image_w;
  cfg.synth.channels = cfg.model.channels;
}

std::string get_config_value(const ExperimentConfig& cfg, const std::string& key) {
  const KeyEntry* e = find_key(key);
  if (!e) throw ConfigError("unknown config key '" + key + "'");
  return e->get(cfg);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& e : key_table()) out.push_back(e.key);
  return out;
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = section.empty() ? trim(line.substr(0, eq))
                                            : section + "." + trim(line.substr(0, eq));
    set_config_value(cfg, key, trim(line.substr(eq + 1)));
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config(buf.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& e : key_table()) {
    const std::string sec = e.key.substr(0, e.key.find('.'));
    if (sec != section) {
      if (!out.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += e.key.substr(e.key.find('.') + 1) + " = " + e.get(cfg) + "\n";
  }
  return out;
}

uint64_t config_digest(const ExperimentConfig& cfg) {
  const std::string s = serialize_config(cfg);
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace fedlora
