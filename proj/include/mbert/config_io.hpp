#pragma once

// JSON mapping for every configuration struct. Readers start from the defaults,
// override the keys present, and reject unknown keys and ill-typed values.

#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "mbert/corpus.hpp"
#include "mbert/errors.hpp"
#include "mbert/masking.hpp"
#include "mbert/model.hpp"
#include "mbert/optim.hpp"
#include "mbert/train_config.hpp"

namespace mbert {

using Json = nlohmann::ordered_json;

template <class V>
void from_json_checked(const Json& j, std::vector<V>& out, const std::string& where);

class FieldReader {
 public:
  FieldReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class V>
  FieldReader& operator()(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return *this;
    const Json& v = j_.at(key);
    const std::string path = where_ + "." + key;
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<V> && std::is_unsigned_v<V>) {
      if (!v.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
      out = v.get<V>();
    } else if constexpr (std::is_integral_v<V>) {
      if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
      out = v.get<V>();
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number");
      out = v.get<V>();
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!v.is_string()) throw ConfigError(path + ": expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_same_v<V, std::optional<double>>) {
      if (v.is_null()) {
        out.reset();
      } else if (v.is_number()) {
        out = v.get<double>();
      } else {
        throw ConfigError(path + ": expected a number or null");
      }
    } else {
      from_json_checked(v, out, path);
    }
    return *this;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------------

inline Json to_json_value(const ModelConfig& c) {
  Json j;
  j["vocab_size"] = c.vocab_size;
  j["hidden_dim"] = c.hidden_dim;
  j["num_layers"] = c.num_layers;
  j["num_heads"] = c.num_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["max_seq_len"] = c.max_seq_len;
  j["rope_theta"] = c.rope_theta;
  j["local_rope_theta"] = c.local_rope_theta ? Json(*c.local_rope_theta) : Json(nullptr);
  j["local_window"] = c.local_window;
  j["global_every"] = c.global_every;
  j["layernorm_eps"] = c.layernorm_eps;
  j["seed"] = c.seed;
  j["tie_embeddings"] = c.tie_embeddings;
  j["linear_bias"] = c.linear_bias;
  j["init_std"] = c.init_std;
  return j;
}

inline void from_json_checked(const Json& j, ModelConfig& c, const std::string& where) {
  FieldReader(j, where)("vocab_size", c.vocab_size)("hidden_dim", c.hidden_dim)("num_layers", c.num_layers)(
      "num_heads", c.num_heads)("ffn_dim", c.ffn_dim)("max_seq_len", c.max_seq_len)("rope_theta", c.rope_theta)(
      "local_rope_theta", c.local_rope_theta)("local_window", c.local_window)("global_every", c.global_every)(
      "layernorm_eps", c.layernorm_eps)("seed", c.seed)("tie_embeddings", c.tie_embeddings)(
      "linear_bias", c.linear_bias)("init_std", c.init_std)
      .finish();
}

inline Json to_json_value(const AdamWConfig& c) {
  return Json{{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

inline void from_json_checked(const Json& j, AdamWConfig& c, const std::string& where) {
  FieldReader(j, where)("beta1", c.beta1)("beta2", c.beta2)("eps", c.eps)("weight_decay", c.weight_decay).finish();
}

inline Json to_json_value(const MaskingConfig& c) {
  return Json{{"probability", c.probability}, {"mask_fraction", c.mask_fraction}, {"random_fraction", c.random_fraction}};
}

inline void from_json_checked(const Json& j, MaskingConfig& c, const std::string& where) {
  FieldReader(j, where)("probability", c.probability)("mask_fraction", c.mask_fraction)(
      "random_fraction", c.random_fraction)
      .finish();
}

inline Json to_json_value(const TrainConfig& c) {
  Json j;
  j["stage"] = c.stage;
  j["max_seq_len"] = c.max_seq_len;
  j["total_steps"] = c.total_steps;
  j["batch_size"] = c.batch_size;
  j["peak_lr"] = c.peak_lr;
  j["warmup_steps"] = c.warmup_steps;
  j["masking"] = to_json_value(c.masking);
  j["grad_clip"] = c.grad_clip;
  j["adamw"] = to_json_value(c.adamw);
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["validate_every"] = c.validate_every;
  j["reset_optimizer"] = c.reset_optimizer;
  j["add_cls_sep"] = c.add_cls_sep;
  return j;
}

inline void from_json_checked(const Json& j, TrainConfig& c, const std::string& where) {
  FieldReader(j, where)("stage", c.stage)("max_seq_len", c.max_seq_len)("total_steps", c.total_steps)(
      "batch_size", c.batch_size)("peak_lr", c.peak_lr)("warmup_steps", c.warmup_steps)("masking", c.masking)(
      "grad_clip", c.grad_clip)("adamw", c.adamw)("seed", c.seed)("checkpoint_every", c.checkpoint_every)(
      "validate_every", c.validate_every)("reset_optimizer", c.reset_optimizer)("add_cls_sep", c.add_cls_sep)
      .finish();
}

inline Json to_json_value(const LengthBin& b) { return Json{{"lo", b.lo}, {"hi", b.hi}, {"weight", b.weight}}; }

inline void from_json_checked(const Json& j, LengthBin& b, const std::string& where) {
  FieldReader(j, where)("lo", b.lo)("hi", b.hi)("weight", b.weight).finish();
}

inline Json to_json_value(const SynthSpec& s) {
  Json bins = Json::array();
  for (const auto& b : s.bins) bins.push_back(to_json_value(b));
  Json j;
  j["topics"] = s.topics;
  j["nouns_per_topic"] = s.nouns_per_topic;
  j["verbs_per_topic"] = s.verbs_per_topic;
  j["adjectives_per_topic"] = s.adjectives_per_topic;
  j["num_facts"] = s.num_facts;
  j["num_values"] = s.num_values;
  j["fact_rate"] = s.fact_rate;
  j["verb_affinity"] = s.verb_affinity;
  j["repeat_rate"] = s.repeat_rate;
  j["bins"] = bins;
  return j;
}

template <class V>
void from_json_checked(const Json& j, std::vector<V>& out, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array");
  out.clear();
  for (std::size_t i = 0; i < j.size(); ++i) {
    V v{};
    const std::string path = where + "[" + std::to_string(i) + "]";
    if constexpr (std::is_arithmetic_v<V>) {
      if (!j[i].is_number()) throw ConfigError(path + ": expected a number");
      if constexpr (std::is_integral_v<V> && std::is_unsigned_v<V>) {
        if (!j[i].is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
      }
      v = j[i].get<V>();
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!j[i].is_string()) throw ConfigError(path + ": expected a string");
      v = j[i].get<std::string>();
    } else {
      from_json_checked(j[i], v, path);
    }
    out.push_back(std::move(v));
  }
}

inline void from_json_checked(const Json& j, SynthSpec& s, const std::string& where) {
  FieldReader(j, where)("topics", s.topics)("nouns_per_topic", s.nouns_per_topic)(
      "verbs_per_topic", s.verbs_per_topic)("adjectives_per_topic", s.adjectives_per_topic)(
      "num_facts", s.num_facts)("num_values", s.num_values)("fact_rate", s.fact_rate)(
      "verb_affinity", s.verb_affinity)("repeat_rate", s.repeat_rate)("bins", s.bins)
      .finish();
}

template <class C>
C config_from_json(const Json& j, const std::string& where) {
  C c{};
  from_json_checked(j, c, where);
  return c;
}

}  // namespace mbert
