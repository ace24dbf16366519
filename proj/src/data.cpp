#include "cmssl/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace cmssl {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view provenance_name(Provenance p) { return p == Provenance::kId ? "id" : "ood"; }

// ---------------------------------------------------------------- IDX

namespace {

std::vector<unsigned char> slurp(const fs::path& path) {
  if (fs::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  const fs::path gz = path.string() + ".gz";
  gzFile f = gzopen(gz.c_str(), "rb");
  if (!f) throw InputError("cannot open " + path.string() + " (or .gz)");
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int got;
  while ((got = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + got);
  gzclose(f);
  if (got < 0) throw InputError("corrupt gzip stream in " + gz.string());
  return out;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  if (off + 4 > b.size()) throw InputError("truncated IDX header");
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace

LabeledImages read_idx(const fs::path& images_file, const fs::path& labels_file) {
  const auto ib = slurp(images_file);
  const auto lb = slurp(labels_file);
  if (be32(ib, 0) != 0x803) throw InputError(images_file.string() + ": not an IDX3 uint8 file");
  if (be32(lb, 0) != 0x801) throw InputError(labels_file.string() + ": not an IDX1 uint8 file");
  const std::size_t n = be32(ib, 4), h = be32(ib, 8), w = be32(ib, 12);
  if (be32(lb, 4) != n) throw InputError("IDX image/label counts differ");
  if (ib.size() < 16 + n * h * w || lb.size() < 8 + n) throw InputError("truncated IDX payload");
  LabeledImages out;
  out.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image im(1, static_cast<int>(h), static_cast<int>(w));
    const unsigned char* p = ib.data() + 16 + i * h * w;
    for (std::size_t j = 0; j < h * w; ++j) im.pixels[j] = p[j] / 255.0f;
    out.images.push_back(std::move(im));
    out.labels.push_back(lb[8 + i]);
  }
  return out;
}

fs::path data_root() {
  if (const char* env = std::getenv("CMSSL_DATA_ROOT"); env && *env) return env;
  return "data";
}

LabeledImages load_source(const std::string& name, const fs::path& root) {
  if (name != "mnist" && name != "fashion-mnist")
    throw InputError("no loader for source '" + name +
                     "'; available: mnist, fashion-mnist (plus synthetic gaussian, uniform)");
  const fs::path dir = root / name;
  const fs::path img = dir / "train-images-idx3-ubyte", lab = dir / "train-labels-idx1-ubyte";
  auto present = [](const fs::path& p) {
    return fs::exists(p) || fs::exists(p.string() + ".gz");
  };
  if (!present(img) || !present(lab))
    throw InputError("source '" + name + "' not found under " + dir.string() +
                     "; run: python3 tools/fetch_datasets.py " + name +
                     " (or set CMSSL_DATA_ROOT)");
  return read_idx(img, lab);
}

// ---------------------------------------------------------------- PNM

void write_pnm(const fs::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3)
    throw InputError("write_pnm: 1 or 3 channels required");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
  std::string buf;
  buf.reserve(image.size());
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < image.channels; ++c)
        buf.push_back(static_cast<char>(std::lround(std::clamp(image.at(c, y, x), 0.f, 1.f) * 255.f)));
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

Image read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  if ((magic != "P5" && magic != "P6") || maxval != 255 || w <= 0 || h <= 0)
    throw InputError(path.string() + ": unsupported PNM header");
  const int c = magic == "P5" ? 1 : 3;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * c);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw InputError(path.string() + ": truncated pixel data");
  Image im(c, h, w);
  std::size_t k = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) im.at(ch, y, x) = raw[k++] / 255.0f;
  return im;
}

std::vector<Image> synth_noise_ood(NoiseKind kind, int count, int channels, int height, int width,
                                   Rng& rng) {
  std::vector<Image> out;
  out.reserve(std::max(count, 0));
  std::normal_distribution<double> gauss(0.5, 0.25);
  for (int i = 0; i < count; ++i) {
    Image im(channels, height, width);
    for (auto& v : im.pixels)
      v = kind == NoiseKind::kGaussian ? static_cast<float>(std::clamp(gauss(rng), 0.0, 1.0))
                                       : static_cast<float>(uniform01(rng));
    out.push_back(std::move(im));
  }
  return out;
}

// ---------------------------------------------------------------- presets

DatasetSpec DatasetSpec::preset(const std::string& name) {
  DatasetSpec s;
  s.name = name;
  if (name == "mnist-id5") return s;
  if (name == "mnist-fashion") {
    s.id_classes = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    s.ood_source = "fashion-mnist";
    return s;
  }
  if (name == "mnist-gaussian" || name == "mnist-uniform") {
    s.ood_source = name == "mnist-gaussian" ? "gaussian" : "uniform";
    return s;
  }
  if (name == "cifar10-tin") {
    s.id_source = "cifar10";
    s.ood_source = "tiny-imagenet";
    s.id_classes = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    s.val_per_class = 0;
    s.test_per_class = -1;
    s.n_ood = 10000;
    s.n_ood_val = 0;
    s.n_ood_test = 0;
    return s;
  }
  std::string list;
  for (const auto& p : preset_names()) list += (list.empty() ? "" : ", ") + p;
  throw ConfigError("unknown dataset preset '" + name + "'; available: " + list);
}

std::vector<std::string> DatasetSpec::preset_names() {
  return {"mnist-id5", "mnist-fashion", "mnist-gaussian", "mnist-uniform", "cifar10-tin"};
}

// ---------------------------------------------------------------- split

namespace {

void shuffle(std::vector<int>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i - 1)));
    std::swap(v[i - 1], v[j]);
  }
}

std::vector<int> indices_with_label(std::span<const int> labels, int c) {
  std::vector<int> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == c) out.push_back(static_cast<int>(i));
  return out;
}

void take(std::vector<int>& from, std::size_t& pos, std::size_t count, std::vector<int>& to) {
  to.insert(to.end(), from.begin() + pos, from.begin() + pos + count);
  pos += count;
}

}  // namespace

OpenSetSplit build_openset_split(const DatasetSpec& spec, std::span<const int> id_train_labels,
                                 std::span<const int> id_test_labels, std::span<const int> ood_labels) {
  if (spec.id_classes.empty()) throw ConfigError("dataset: id_classes is empty");
  if (spec.labels_per_class < 1) throw ConfigError("dataset: labels_per_class must be >= 1");
  if (spec.n_ood < 0 || spec.n_ood_val < 0 || spec.n_ood_test < 0 || spec.val_per_class < 0)
    throw ConfigError("dataset: counts must be non-negative");
  Rng rng = make_rng(spec.split_seed, Stream::kSplit);
  OpenSetSplit s;
  s.eval_from_test_source = !id_test_labels.empty();
  std::string shortfall;
  for (int c : spec.id_classes) {
    auto train = indices_with_label(id_train_labels, c);
    shuffle(train, rng);
    std::size_t pos = 0;
    std::size_t need = spec.labels_per_class;
    if (!s.eval_from_test_source) {
      if (spec.test_per_class < 0)
        throw ConfigError("dataset: test_per_class = -1 needs a separate test source");
      need += spec.val_per_class + spec.test_per_class;
    }
    if (train.size() < need) {
      shortfall += " class " + std::to_string(c) + " needs " + std::to_string(need) + ", has " +
                   std::to_string(train.size()) + ";";
      continue;
    }
    take(train, pos, spec.labels_per_class, s.labeled);
    if (!s.eval_from_test_source) {
      take(train, pos, spec.val_per_class, s.val);
      take(train, pos, spec.test_per_class, s.test);
    }
    take(train, pos, train.size() - pos, s.unlabeled_id);
    if (s.eval_from_test_source) {
      auto test = indices_with_label(id_test_labels, c);
      shuffle(test, rng);
      const std::size_t t_need =
          spec.val_per_class + (spec.test_per_class < 0 ? 0 : spec.test_per_class);
      if (test.size() < t_need) {
        shortfall += " class " + std::to_string(c) + " test split needs " +
                     std::to_string(t_need) + ", has " + std::to_string(test.size()) + ";";
        continue;
      }
      std::size_t tp = 0;
      take(test, tp, spec.val_per_class, s.val);
      take(test, tp, spec.test_per_class < 0 ? test.size() - tp : spec.test_per_class, s.test);
    }
  }
  std::vector<int> ood;
  for (std::size_t i = 0; i < ood_labels.size(); ++i) {
    const int l = ood_labels[i];
    const bool is_id = std::find(spec.id_classes.begin(), spec.id_classes.end(), l) !=
                       spec.id_classes.end();
    const bool allowed = spec.ood_classes.empty() ||
                         std::find(spec.ood_classes.begin(), spec.ood_classes.end(), l) !=
                             spec.ood_classes.end();
    if (l < 0 || (!is_id && allowed)) ood.push_back(static_cast<int>(i));
  }
  const std::size_t ood_need = spec.n_ood + spec.n_ood_val + spec.n_ood_test;
  if (ood.size() < ood_need)
    shortfall += " OOD needs " + std::to_string(ood_need) + ", has " + std::to_string(ood.size()) + ";";
  if (!shortfall.empty()) throw InputError("insufficient source images:" + shortfall);
  shuffle(ood, rng);
  std::size_t op = 0;
  take(ood, op, spec.n_ood, s.ood_unlabeled);
  take(ood, op, spec.n_ood_val, s.ood_val);
  take(ood, op, spec.n_ood_test, s.ood_test);
  return s;
}

// ---------------------------------------------------------------- provenance

namespace {
std::atomic<std::uint64_t> g_violations{0};
thread_local int t_loss_depth = 0;
}  // namespace

const HiddenTag& ProvenanceLedger::read(std::size_t i) const {
  reads_.fetch_add(1, std::memory_order_relaxed);
  if (LossScope::active()) g_violations.fetch_add(1, std::memory_order_relaxed);
  return tags_.at(i);
}

std::vector<HiddenTag> ProvenanceLedger::read_all() const {
  reads_.fetch_add(tags_.size(), std::memory_order_relaxed);
  if (LossScope::active()) g_violations.fetch_add(tags_.size(), std::memory_order_relaxed);
  return tags_;
}

std::uint64_t ProvenanceLedger::violations() { return g_violations.load(); }
void ProvenanceLedger::reset_violations() { g_violations.store(0); }

LossScope::LossScope() { ++t_loss_depth; }
LossScope::~LossScope() { --t_loss_depth; }
bool LossScope::active() { return t_loss_depth > 0; }

// ---------------------------------------------------------------- materialize

namespace {

int remap(const DatasetSpec& spec, int source_class) {
  const auto it = std::find(spec.id_classes.begin(), spec.id_classes.end(), source_class);
  return static_cast<int>(it - spec.id_classes.begin());
}

bool is_noise(const std::string& s) { return s == "gaussian" || s == "uniform"; }

}  // namespace

OpenSetDataset build_openset_dataset(const DatasetSpec& spec, const LabeledImages& id_train,
                                     const LabeledImages* id_test, const LabeledImages* ood) {
  if (id_train.size() == 0) throw InputError("dataset: empty ID source");
  OpenSetDataset ds;
  ds.spec = spec;
  ds.num_classes = static_cast<int>(spec.id_classes.size());
  ds.channels = id_train.images[0].channels;
  ds.image_size = id_train.images[0].height;
  const std::size_t n_noise = spec.n_ood + spec.n_ood_val + spec.n_ood_test;

  LabeledImages noise;
  if (!ood && is_noise(spec.ood_source)) {
    Rng rng = make_rng(spec.split_seed, Stream::kNoise);
    noise.images = synth_noise_ood(spec.ood_source == "gaussian" ? NoiseKind::kGaussian
                                                                 : NoiseKind::kUniform,
                                   static_cast<int>(n_noise), ds.channels, ds.image_size,
                                   ds.image_size, rng);
    noise.labels.assign(n_noise, -1);
    ood = &noise;
  }
  if (!ood) ood = &id_train;  // intra-dataset
  const auto split = build_openset_split(
      spec, id_train.labels, id_test ? std::span<const int>(id_test->labels) : std::span<const int>{},
      ood->labels);
  const LabeledImages& eval_src = split.eval_from_test_source ? *id_test : id_train;

  for (int i : split.labeled) {
    ds.labeled.push_back(id_train.images[i]);
    ds.labeled_labels.push_back(remap(spec, id_train.labels[i]));
  }
  for (int i : split.val) {
    ds.val.push_back(eval_src.images[i]);
    ds.val_labels.push_back(remap(spec, eval_src.labels[i]));
  }
  for (int i : split.test) {
    ds.test.push_back(eval_src.images[i]);
    ds.test_labels.push_back(remap(spec, eval_src.labels[i]));
  }
  for (int i : split.ood_val) ds.ood_val.push_back(ood->images[i]);
  for (int i : split.ood_test) ds.ood_test.push_back(ood->images[i]);

  // Pool order must not reveal provenance.
  struct Entry {
    const Image* image;
    HiddenTag tag;
  };
  std::vector<Entry> pool;
  for (int i : split.unlabeled_id)
    pool.push_back({&id_train.images[i], {Provenance::kId, remap(spec, id_train.labels[i])}});
  for (int i : split.ood_unlabeled) pool.push_back({&ood->images[i], {Provenance::kOod, -1}});
  std::vector<int> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(spec.split_seed, Stream::kSplit, {1});
  shuffle(order, rng);
  std::vector<HiddenTag> tags;
  for (int o : order) {
    ds.unlabeled.push_back(*pool[o].image);
    tags.push_back(pool[o].tag);
  }
  ds.unlabeled_tags = ProvenanceLedger(std::move(tags));
  return ds;
}

OpenSetDataset build_openset_dataset(const DatasetSpec& spec, const fs::path& root) {
  const LabeledImages id = load_source(spec.id_source, root);
  if (is_noise(spec.ood_source) || spec.ood_source == spec.id_source)
    return build_openset_dataset(spec, id, nullptr, nullptr);
  const LabeledImages ood = load_source(spec.ood_source, root);
  return build_openset_dataset(spec, id, nullptr, &ood);
}

// ---------------------------------------------------------------- manifests

namespace {

struct ManifestRow {
  std::string path;
  std::optional<int> label;
  Provenance provenance;
  int truth;
};

void write_split(const fs::path& dir, const std::vector<Image>& images,
                 const std::vector<ManifestRow>& rows) {
  fs::create_directories(dir / "images");
  std::ofstream out(dir / "manifest.jsonl", std::ios::binary);
  for (std::size_t i = 0; i < images.size(); ++i) {
    write_pnm(dir / rows[i].path, images[i]);
    json j;
    j["path"] = rows[i].path;
    j["label"] = rows[i].label ? json(*rows[i].label) : json(nullptr);
    j["provenance"] = std::string(provenance_name(rows[i].provenance));
    j["truth"] = rows[i].truth;
    out << j.dump() << '\n';
  }
}

std::string image_name(std::size_t i, const Image& im) {
  std::ostringstream s;
  s << "images/" << std::setw(6) << std::setfill('0') << i << (im.channels == 1 ? ".pgm" : ".ppm");
  return s.str();
}

std::vector<ManifestRow> labeled_rows(const std::vector<Image>& ims, const std::vector<int>& labels) {
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < ims.size(); ++i)
    rows.push_back({image_name(i, ims[i]), labels[i], Provenance::kId, labels[i]});
  return rows;
}

std::vector<ManifestRow> ood_rows(const std::vector<Image>& ims) {
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < ims.size(); ++i)
    rows.push_back({image_name(i, ims[i]), std::nullopt, Provenance::kOod, -1});
  return rows;
}

std::vector<std::pair<Image, ManifestRow>> read_split(const fs::path& dir) {
  std::ifstream in(dir / "manifest.jsonl");
  if (!in) throw InputError("missing manifest " + (dir / "manifest.jsonl").string());
  std::vector<std::pair<Image, ManifestRow>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    ManifestRow r;
    r.path = j.at("path").get<std::string>();
    if (!j.at("label").is_null()) r.label = j.at("label").get<int>();
    r.provenance = j.at("provenance").get<std::string>() == "ood" ? Provenance::kOod : Provenance::kId;
    r.truth = j.value("truth", -1);
    out.emplace_back(read_pnm(dir / r.path), r);
  }
  return out;
}

json spec_to_json(const DatasetSpec& s) {
  return {{"name", s.name},
          {"id_source", s.id_source},
          {"ood_source", s.ood_source},
          {"id_classes", s.id_classes},
          {"ood_classes", s.ood_classes},
          {"labels_per_class", s.labels_per_class},
          {"val_per_class", s.val_per_class},
          {"test_per_class", s.test_per_class},
          {"n_ood", s.n_ood},
          {"n_ood_val", s.n_ood_val},
          {"n_ood_test", s.n_ood_test},
          {"split_seed", s.split_seed}};
}

DatasetSpec spec_from_json(const json& j) {
  DatasetSpec s;
  s.name = j.at("name");
  s.id_source = j.at("id_source");
  s.ood_source = j.at("ood_source");
  s.id_classes = j.at("id_classes").get<std::vector<int>>();
  s.ood_classes = j.at("ood_classes").get<std::vector<int>>();
  s.labels_per_class = j.at("labels_per_class");
  s.val_per_class = j.at("val_per_class");
  s.test_per_class = j.at("test_per_class");
  s.n_ood = j.at("n_ood");
  s.n_ood_val = j.at("n_ood_val");
  s.n_ood_test = j.at("n_ood_test");
  s.split_seed = j.at("split_seed");
  return s;
}

}  // namespace

void write_manifests(const OpenSetDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "dataset.json");
    json j = {{"spec", spec_to_json(ds.spec)},
              {"num_classes", ds.num_classes},
              {"channels", ds.channels},
              {"image_size", ds.image_size}};
    out << j.dump(2) << '\n';
  }
  write_split(dir / "labeled", ds.labeled, labeled_rows(ds.labeled, ds.labeled_labels));
  std::vector<ManifestRow> urows;
  const auto tags = ds.unlabeled_tags.read_all();
  for (std::size_t i = 0; i < ds.unlabeled.size(); ++i)
    urows.push_back({image_name(i, ds.unlabeled[i]), std::nullopt, tags[i].provenance, tags[i].true_class});
  write_split(dir / "unlabeled", ds.unlabeled, urows);
  write_split(dir / "val", ds.val, labeled_rows(ds.val, ds.val_labels));
  write_split(dir / "test", ds.test, labeled_rows(ds.test, ds.test_labels));
  write_split(dir / "ood_val", ds.ood_val, ood_rows(ds.ood_val));
  write_split(dir / "ood_test", ds.ood_test, ood_rows(ds.ood_test));
}

OpenSetDataset read_manifests(const fs::path& dir) {
  std::ifstream in(dir / "dataset.json");
  if (!in) throw InputError("no prepared dataset at " + dir.string() + " (run `cmssl prepare`)");
  const json meta = json::parse(in);
  OpenSetDataset ds;
  ds.spec = spec_from_json(meta.at("spec"));
  ds.num_classes = meta.at("num_classes");
  ds.channels = meta.at("channels");
  ds.image_size = meta.at("image_size");
  auto labeled = [&](const char* name, std::vector<Image>& ims, std::vector<int>& labels) {
    for (auto& [im, row] : read_split(dir / name)) {
      if (!row.label) throw InputError(std::string(name) + " manifest row without label");
      ims.push_back(std::move(im));
      labels.push_back(*row.label);
    }
  };
  labeled("labeled", ds.labeled, ds.labeled_labels);
  labeled("val", ds.val, ds.val_labels);
  labeled("test", ds.test, ds.test_labels);
  std::vector<HiddenTag> tags;
  for (auto& [im, row] : read_split(dir / "unlabeled")) {
    ds.unlabeled.push_back(std::move(im));
    tags.push_back({row.provenance, row.truth});
  }
  ds.unlabeled_tags = ProvenanceLedger(std::move(tags));
  for (auto& [im, row] : read_split(dir / "ood_val")) ds.ood_val.push_back(std::move(im));
  for (auto& [im, row] : read_split(dir / "ood_test")) ds.ood_test.push_back(std::move(im));
  return ds;
}

// ---------------------------------------------------------------- sampler

BatchSampler::BatchSampler(std::vector<int> labels, std::size_t pool_size, int n, int m,
                           std::uint64_t seed)
    : labels_(std::move(labels)), pool_size_(pool_size), n_(n), m_(m), seed_(seed) {
  if (labels_.empty() && n > 0) throw InputError("batch sampler: labeled set is empty");
  if (pool_size_ == 0 && m > 0) throw InputError("batch sampler: unlabeled pool is empty");
}

const std::vector<int>& BatchSampler::epoch_permutation(std::uint64_t epoch) const {
  if (epoch != cached_epoch_) {
    cached_perm_.resize(labels_.size());
    std::iota(cached_perm_.begin(), cached_perm_.end(), 0);
    Rng rng = make_rng(seed_, Stream::kLabeledEpoch, {epoch});
    shuffle(cached_perm_, rng);
    cached_epoch_ = epoch;
  }
  return cached_perm_;
}

namespace {

void draw(const std::vector<int>& from, int count, Rng& rng, std::vector<int>& out) {
  if (count <= 0 || from.empty()) return;
  const int size = static_cast<int>(from.size());
  if (size >= count) {
    std::vector<int> tmp = from;
    for (int i = 0; i < count; ++i) {
      std::swap(tmp[i], tmp[uniform_int(rng, i, size - 1)]);
      out.push_back(tmp[i]);
    }
  } else {
    for (int i = 0; i < count; ++i) out.push_back(from[uniform_int(rng, 0, size - 1)]);
  }
}

}  // namespace

BatchIndices BatchSampler::next_batch(std::uint64_t iteration, const KeepMask& keep,
                                      int extra_count) const {
  if (keep.size() != pool_size_) throw InputError("batch sampler: keep mask length mismatch");
  BatchIndices b;
  const std::uint64_t L = labels_.size();
  for (int j = 0; j < n_; ++j) {
    const std::uint64_t pos = iteration * static_cast<std::uint64_t>(n_) + j;
    const auto& perm = epoch_permutation(pos / L);
    const int idx = perm[pos % L];
    b.labeled.push_back(idx);
    b.labels.push_back(labels_[idx]);
  }
  std::vector<int> kept, dropped;
  for (std::size_t i = 0; i < pool_size_; ++i) (keep[i] ? kept : dropped).push_back(static_cast<int>(i));
  if (kept.empty() && m_ > 0) {
    b.fell_back = true;
    kept.swap(dropped);
  }
  Rng rng = make_rng(seed_, Stream::kUnlabeledDraw, {iteration});
  draw(kept, m_, rng, b.unlabeled);
  if (!b.fell_back) {
    Rng rrng = make_rng(seed_, Stream::kRotationDraw, {iteration});
    draw(dropped, extra_count, rrng, b.extra);
  }
  return b;
}

}  // namespace cmssl
