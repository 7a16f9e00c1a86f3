#include "toylm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace toylm {

namespace {

struct KeyDef {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

uint64_t to_u64(const std::string& v) {
  uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("expected an unsigned integer, got '" + v + "'");
  return out;
}

size_t to_size(const std::string& v) { return static_cast<size_t>(to_u64(v)); }

int to_int(const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("expected an integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& v) {
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

#define NUM_KEY(name, field, conv, fmt)                                     \
  {name, [](RunConfig& c, const std::string& v) { c.field = conv(v); },     \
   [](const RunConfig& c) { return fmt(c.field); }}

std::string fmt_size(size_t v) { return std::to_string(v); }
std::string fmt_u64(uint64_t v) { return std::to_string(v); }
std::string fmt_int(int v) { return std::to_string(v); }
std::string fmt_bool(bool v) { return v ? "true" : "false"; }
std::string fmt_str(const std::string& v) { return v; }
// "" in the file round-trips an empty value
std::string ident(const std::string& v) { return v == "\"\"" ? "" : v; }

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = {
      NUM_KEY("seed", harness.seed, to_u64, fmt_u64),
      {"precision",
       [](RunConfig& c, const std::string& v) {
         if (v == "f64") c.harness.model.dtype = DType::f64;
         else if (v == "f32") c.harness.model.dtype = DType::f32;
         else throw ConfigError("precision must be f64 or f32, got '" + v + "'");
       },
       [](const RunConfig& c) {
         return c.harness.model.dtype == DType::f32 ? "f32" : "f64";
       }},
      NUM_KEY("out_dir", out_dir, ident, fmt_str),
      NUM_KEY("corpus", harness.corpus_path, ident, fmt_str),
      NUM_KEY("valid_fraction", harness.valid_fraction, to_double, fmt_double),
      {"stages",
       [](RunConfig& c, const std::string& v) {
         try {
           c.harness.plan = StagePlan::parse(v);
         } catch (const std::exception& e) {
           throw ConfigError(e.what());
         }
       },
       [](const RunConfig& c) { return c.harness.plan.render(); }},

      {"model.attention",
       [](RunConfig& c, const std::string& v) {
         if (v == "mha") c.harness.model.attention = AttentionVariant::mha;
         else if (v == "mla") c.harness.model.attention = AttentionVariant::mla;
         else throw ConfigError("model.attention must be mha or mla");
       },
       [](const RunConfig& c) {
         return c.harness.model.attention == AttentionVariant::mha ? "mha"
                                                                   : "mla";
       }},
      {"model.ffn",
       [](RunConfig& c, const std::string& v) {
         if (v == "dense") c.harness.model.ffn = FfnVariant::dense;
         else if (v == "moe") c.harness.model.ffn = FfnVariant::moe;
         else throw ConfigError("model.ffn must be dense or moe");
       },
       [](const RunConfig& c) {
         return c.harness.model.ffn == FfnVariant::moe ? "moe" : "dense";
       }},
      {"model.d",
       [](RunConfig& c, const std::string& v) {
         c.harness.model.attn.d = to_size(v);
         c.harness.model.moe.d = c.harness.model.attn.d;
       },
       [](const RunConfig& c) { return fmt_size(c.harness.model.attn.d); }},
      NUM_KEY("model.n_h", harness.model.attn.n_h, to_size, fmt_size),
      NUM_KEY("model.d_h", harness.model.attn.d_h, to_size, fmt_size),
      NUM_KEY("model.d_c", harness.model.attn.d_c, to_size, fmt_size),
      NUM_KEY("model.d_c_q", harness.model.attn.d_c_q, to_size, fmt_size),
      NUM_KEY("model.d_h_r", harness.model.attn.d_h_r, to_size, fmt_size),
      NUM_KEY("model.layers", harness.model.attn.l, to_size, fmt_size),
      NUM_KEY("model.rope_base", harness.model.attn.rope_base, to_double,
              fmt_double),
      NUM_KEY("model.ffn_inner", harness.model.ffn_inner, to_size, fmt_size),
      NUM_KEY("model.tie_head", harness.model.tie_head, to_bool, fmt_bool),

      NUM_KEY("moe.N", harness.model.moe.N, to_size, fmt_size),
      NUM_KEY("moe.m", harness.model.moe.m, to_size, fmt_size),
      NUM_KEY("moe.K", harness.model.moe.K, to_size, fmt_size),
      NUM_KEY("moe.K_s", harness.model.moe.K_s, to_size, fmt_size),
      NUM_KEY("moe.ffn_inner", harness.model.moe.ffn_inner, to_size, fmt_size),
      NUM_KEY("moe.alpha", harness.model.moe.alpha, to_double, fmt_double),
      NUM_KEY("moe.gamma", harness.model.moe.gamma, to_double, fmt_double),
      {"moe.routing",
       [](RunConfig& c, const std::string& v) {
         if (v == "aux_loss") c.harness.model.moe.routing = RoutingMode::aux_loss;
         else if (v == "loss_free")
           c.harness.model.moe.routing = RoutingMode::loss_free;
         else throw ConfigError("moe.routing must be aux_loss or loss_free");
       },
       [](const RunConfig& c) {
         return c.harness.model.moe.routing == RoutingMode::loss_free
                    ? "loss_free"
                    : "aux_loss";
       }},

      NUM_KEY("mtp.D", harness.model.mtp.D, to_size, fmt_size),
      NUM_KEY("mtp.lambda", harness.model.mtp.lambda, to_double, fmt_double),

      NUM_KEY("pretrain.steps", harness.pretrain.steps, to_size, fmt_size),
      NUM_KEY("pretrain.seq_len", harness.pretrain.seq_len, to_size, fmt_size),
      NUM_KEY("pretrain.lr", harness.pretrain.lr, to_double, fmt_double),
      NUM_KEY("pretrain.warmup", harness.pretrain.warmup, to_size, fmt_size),
      NUM_KEY("pretrain.beta2", harness.pretrain.beta2, to_double, fmt_double),
      NUM_KEY("pretrain.smooth_window", harness.pretrain.smooth_window,
              to_size, fmt_size),

      NUM_KEY("cold_start.samples", harness.cold_start.samples, to_size,
              fmt_size),
      NUM_KEY("cold_start.max_digits", harness.cold_start.max_digits, to_int,
              fmt_int),
      NUM_KEY("cold_start.steps", harness.cold_start.sft.steps, to_size,
              fmt_size),
      NUM_KEY("cold_start.lr", harness.cold_start.sft.lr, to_double,
              fmt_double),
      NUM_KEY("cold_start.warmup", harness.cold_start.sft.warmup, to_size,
              fmt_size),

      NUM_KEY("rl.steps", harness.rl.steps, to_size, fmt_size),
      NUM_KEY("rl.prompts_per_step", harness.rl.prompts_per_step, to_size,
              fmt_size),
      NUM_KEY("rl.max_new_tokens", harness.rl.max_new_tokens, to_size,
              fmt_size),
      NUM_KEY("rl.lr", harness.rl.lr, to_double, fmt_double),
      NUM_KEY("rl.warmup", harness.rl.warmup, to_size, fmt_size),
      NUM_KEY("rl.rewards", harness.rl.rewards, ident, fmt_str),
      NUM_KEY("rl.max_digits", harness.rl.max_digits, to_int, fmt_int),

      NUM_KEY("grpo.epsilon", harness.grpo.epsilon, to_double, fmt_double),
      NUM_KEY("grpo.beta", harness.grpo.beta, to_double, fmt_double),
      NUM_KEY("grpo.group_size", harness.grpo.group_size, to_size, fmt_size),
      {"grpo.supervision",
       [](RunConfig& c, const std::string& v) {
         if (v == "outcome") c.harness.grpo.supervision = Supervision::outcome;
         else if (v == "process")
           c.harness.grpo.supervision = Supervision::process;
         else throw ConfigError("grpo.supervision must be outcome or process");
       },
       [](const RunConfig& c) {
         return c.harness.grpo.supervision == Supervision::process ? "process"
                                                                   : "outcome";
       }},
      NUM_KEY("grpo.std_floor", harness.grpo.std_floor, to_double, fmt_double),
      NUM_KEY("grpo.exact_kl", harness.grpo.exact_kl, to_bool, fmt_bool),
      NUM_KEY("grpo.inner_epochs", harness.grpo.inner_epochs, to_size,
              fmt_size),

      NUM_KEY("reject.prompts", harness.reject.prompts, to_size, fmt_size),
      NUM_KEY("reject.n_per_prompt", harness.reject.n_per_prompt, to_size,
              fmt_size),
      NUM_KEY("reject.max_digits", harness.reject.max_digits, to_int, fmt_int),
      NUM_KEY("reject.max_new_tokens", harness.reject.max_new_tokens, to_size,
              fmt_size),
      NUM_KEY("reject.sft_steps", harness.reject.sft.steps, to_size, fmt_size),
      NUM_KEY("reject.sft_lr", harness.reject.sft.lr, to_double, fmt_double),

      NUM_KEY("align.steps", harness.align.steps, to_size, fmt_size),
      NUM_KEY("align.prompts_per_step", harness.align.prompts_per_step,
              to_size, fmt_size),
      NUM_KEY("align.max_new_tokens", harness.align.max_new_tokens, to_size,
              fmt_size),
      NUM_KEY("align.lr", harness.align.lr, to_double, fmt_double),
      NUM_KEY("align.rewards", harness.align.rewards, ident, fmt_str),
      NUM_KEY("align.max_digits", harness.align.max_digits, to_int, fmt_int),
  };
  return defs;
}

#undef NUM_KEY

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.harness.model.attn = AttentionConfig{};  // d=64, n_h=4, d_h=16, d_c=64,
                                             // d_c_q=32, d_h_r=8, l=2
  c.harness.model.moe.d = c.harness.model.attn.d;
  c.harness.align.rewards = "format:0.5,brevity:0.5";
  c.harness.align.steps = 50;
  c.harness.plan = StagePlan::parse("pretrain");
  return c;
}

void RunConfig::validate(bool check_corpus_readable) const {
  try {
    ModelConfig mc = harness.model;
    mc.vocab = 1;  // filled from the corpus later; validate the rest
    mc.validate();
    harness.grpo.validate();
    harness.validate_plan(RewardRegistry::with_builtins());
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (harness.plan.stages.empty())
    throw ConfigError("stages: at least one stage is required");
  // the vocabulary always comes from the corpus, so every plan needs one
  if (check_corpus_readable) {
    std::ifstream in(harness.corpus_path);
    if (!in)
      throw ConfigError("corpus file is missing or unreadable: " +
                        (harness.corpus_path.empty() ? "(unset)"
                                                     : harness.corpus_path));
  }
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg = default_run_config();
  std::istringstream in(text);
  std::string line;
  size_t line_no = 0;
  bool saw_tag = false;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    // trim
    size_t a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    size_t b = line.find_last_not_of(" \t\r");
    line = line.substr(a, b - a + 1);

    if (!saw_tag) {
      if (line != "toylm_config_v1")
        throw ConfigError("line " + std::to_string(line_no) +
                          ": expected format tag toylm_config_v1");
      saw_tag = true;
      continue;
    }
    const size_t sp = line.find_first_of(" \t");
    if (sp == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) +
                        ": expected 'key value', got '" + line + "'");
    const std::string key = line.substr(0, sp);
    std::string value = line.substr(line.find_first_not_of(" \t", sp));

    bool found = false;
    for (const KeyDef& def : key_defs()) {
      if (def.key == key) {
        try {
          def.set(cfg, value);
        } catch (const ConfigError& e) {
          throw ConfigError("line " + std::to_string(line_no) + ": " +
                            e.what());
        }
        found = true;
        break;
      }
    }
    if (!found)
      throw ConfigError("line " + std::to_string(line_no) +
                        ": unknown key '" + key + "'");
  }
  if (!saw_tag) throw ConfigError("empty config: missing format tag");
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

std::string render_config(const RunConfig& cfg) {
  std::string out = "toylm_config_v1\n";
  for (const KeyDef& def : key_defs()) {
    const std::string v = def.get(cfg);
    out += def.key + " " + (v.empty() ? "\"\"" : v) + "\n";
  }
  return out;
}

}  // namespace toylm
