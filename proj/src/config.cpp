#include "cmssl/config.hpp"

namespace cmssl {

using json = nlohmann::json;

namespace {

#define CMSSL_TRAIN_FIELDS(X)                                                                      \
  X(stage1_iters) X(stage2_iters) X(cleaning_cycle) X(n) X(m) X(lr0) X(momentum) X(weight_decay)   \
  X(seed) X(checkpoint_every) X(eval_avg_last) X(log_every) X(eval_every) X(enable_rotation)       \
  X(enable_cm_u) X(enable_warmup) X(enable_consistency) X(enable_matching) X(rotation_on_dropped)  \
  X(cm_u_kept_only) X(rotations_per_image) X(bn_include_rotations) X(sharpen_targets)             \
  X(sharpen_temperature) X(simple_negative_fallback) X(otsu_bins) X(backbone) X(feature_dim)       \
  X(label_embed_bias)

#define CMSSL_WEIGHT_FIELDS(X) X(ce) X(cc) X(rot) X(cm_l) X(cm_u)

#define CMSSL_AUGMENT_FIELDS(X) \
  X(flip_probability) X(crop_padding) X(strong_ops) X(max_magnitude) X(cutout_fraction) X(rotate_weak_view)

#define CMSSL_DATASET_FIELDS(X)                                                                   \
  X(name) X(id_source) X(ood_source) X(id_classes) X(ood_classes) X(labels_per_class)             \
  X(val_per_class) X(test_per_class) X(n_ood) X(n_ood_val) X(n_ood_test) X(split_seed)

#define CMSSL_PUT(f) j[#f] = v.f;
#define CMSSL_GET(f) j.at(#f).get_to(v.f);

json train_json(const TrainConfig& v) {
  json j;
  CMSSL_TRAIN_FIELDS(CMSSL_PUT)
  j["filter_mode"] = filter_mode_name(v.filter_mode);
  {
    const auto& w = v.weights;
    json wj;
#define CMSSL_PUT_W(f) wj[#f] = w.f;
    CMSSL_WEIGHT_FIELDS(CMSSL_PUT_W)
#undef CMSSL_PUT_W
    j["weights"] = wj;
  }
  {
    const auto& a = v.augment;
    json aj;
#define CMSSL_PUT_A(f) aj[#f] = a.f;
    CMSSL_AUGMENT_FIELDS(CMSSL_PUT_A)
#undef CMSSL_PUT_A
    j["augment"] = aj;
  }
  return j;
}

TrainConfig train_from(const json& j) {
  TrainConfig v;
  CMSSL_TRAIN_FIELDS(CMSSL_GET)
  v.filter_mode = parse_filter_mode(j.at("filter_mode").get<std::string>());
  {
    const json& wj = j.at("weights");
    auto& w = v.weights;
#define CMSSL_GET_W(f) wj.at(#f).get_to(w.f);
    CMSSL_WEIGHT_FIELDS(CMSSL_GET_W)
#undef CMSSL_GET_W
  }
  {
    const json& aj = j.at("augment");
    auto& a = v.augment;
#define CMSSL_GET_A(f) aj.at(#f).get_to(a.f);
    CMSSL_AUGMENT_FIELDS(CMSSL_GET_A)
#undef CMSSL_GET_A
  }
  return v;
}

json dataset_json(const DatasetSpec& v) {
  json j;
  CMSSL_DATASET_FIELDS(CMSSL_PUT)
  return j;
}

DatasetSpec dataset_from(const json& j) {
  DatasetSpec v;
  CMSSL_DATASET_FIELDS(CMSSL_GET)
  return v;
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  return {{"run_name", c.run_name},     {"out_dir", c.out_dir},
          {"schedule", c.schedule},     {"method", c.method},
          {"manifest_dir", c.manifest_dir}, {"dataset", dataset_json(c.dataset)},
          {"train", train_json(c.train)}};
}

ExperimentConfig experiment_from_json(const json& j) {
  const json reference = to_json(ExperimentConfig{});
  check_known_keys(reference, j);
  try {
    ExperimentConfig c;
    c.run_name = j.at("run_name");
    c.out_dir = j.at("out_dir");
    c.schedule = j.at("schedule");
    c.method = j.at("method");
    c.manifest_dir = j.at("manifest_dir");
    c.dataset = dataset_from(j.at("dataset"));
    c.train = train_from(j.at("train"));
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig default_experiment(const std::string& schedule, const std::string& method,
                                    const std::string& dataset_preset) {
  ExperimentConfig c;
  if (schedule == "full-scale") {
    c.train = TrainConfig::full_scale();
  } else if (schedule == "desk") {
    c.train = TrainConfig::desk();
  } else {
    throw ConfigError("unknown schedule '" + schedule + "' (expected full-scale, desk)");
  }
  c.schedule = schedule;
  c.method = method;
  c.train.apply_method(method);
  c.dataset = DatasetSpec::preset(dataset_preset);
  return c;
}

void check_known_keys(const json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) return;
  if (!base.is_object()) throw ConfigError("config key '" + prefix + "' is not an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (value.is_object()) check_known_keys(base.at(key), value, path);
  }
}

json parse_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form key.path=value");
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  std::vector<std::string> parts;
  for (std::size_t start = 0;;) {
    const auto dot = path.find('.', start);
    parts.push_back(path.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json out = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) out = json{{*it, out}};
  return out;
}

ExperimentConfig merge_config(const json& defaults, const std::vector<json>& layers) {
  json merged = defaults;
  for (const auto& layer : layers) {
    check_known_keys(defaults, layer);
    merged.merge_patch(layer);
  }
  return experiment_from_json(merged);
}

}  // namespace cmssl
