#include "bvit/core_types.hpp"

#include <cmath>
#include <sstream>

#include "bvit/error.hpp"

namespace bvit {

double distance(const Point2& a, const Point2& b) { return std::hypot(a.x - b.x, a.y - b.y); }

std::string_view to_string(DiseaseStatus s) {
  return s == DiseaseStatus::normal ? "normal" : "diseased";
}

DiseaseStatus parse_disease_status(std::string_view text) {
  if (text == "normal" || text == "0") return DiseaseStatus::normal;
  if (text == "diseased" || text == "1") return DiseaseStatus::diseased;
  throw DataError("unknown disease_status '" + std::string(text) + "' (expected normal|diseased)");
}

std::vector<std::string> validate_sample(const FundusSample& s) {
  std::vector<std::string> out;
  const Image& im = s.image;
  if (im.empty() || im.width <= 0 || im.height <= 0) {
    out.emplace_back("image is empty");
  } else {
    if (im.channels != 3) out.emplace_back("image must have 3 channels");
    if (im.pixels.size() != static_cast<std::size_t>(im.width) * im.height * im.channels) {
      out.emplace_back("image buffer size does not match its dimensions");
    }
    if (!(s.fovea.x >= 0.0 && s.fovea.x < im.width)) out.emplace_back("fovea_x out of bounds");
    if (!(s.fovea.y >= 0.0 && s.fovea.y < im.height)) out.emplace_back("fovea_y out of bounds");
  }
  if (!(s.disc_radius > 0.0) || !std::isfinite(s.disc_radius)) out.emplace_back("R must be positive");
  if (s.id.empty()) out.emplace_back("id must not be empty");
  return out;
}

// ----------------------------------------------------------------- transform

PreprocessTransform PreprocessTransform::identity(int size) {
  PreprocessTransform t;
  t.crop = {0, 0, size, size};
  t.scale = 1.0;
  t.target_size = size;
  return t;
}

Point2 PreprocessTransform::forward(const Point2& p) const {
  return {(p.x - crop.x0 + pad.left) * scale, (p.y - crop.y0 + pad.top) * scale};
}

Point2 PreprocessTransform::inverse(const Point2& p) const {
  return {p.x / scale - pad.left + crop.x0, p.y / scale - pad.top + crop.y0};
}

void PreprocessTransform::validate() const {
  if (crop.x1 <= crop.x0 || crop.y1 <= crop.y0) {
    throw ConfigError("degenerate crop box");
  }
  if (target_size <= 0) throw ConfigError("target_size must be positive");
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("scale must be positive");
  if (pad.left < 0 || pad.top < 0 || pad.right < 0 || pad.bottom < 0) {
    throw ConfigError("padding must be non-negative");
  }
}

std::string PreprocessTransform::fingerprint() const {
  std::ostringstream os;
  os.precision(17);
  os << crop.x0 << ',' << crop.y0 << ',' << crop.x1 << ',' << crop.y1 << ';' << pad.left << ','
     << pad.top << ',' << pad.right << ',' << pad.bottom << ';' << scale << ';' << target_size;
  return os.str();
}

// ----------------------------------------------------------------- variants

namespace {

struct VariantInfo {
  Variant variant;
  std::string_view name;
  std::string_view label;
  bool vessel;
  bool mff;
  int vessel_channels;
};

constexpr std::array<VariantInfo, 4> kVariants{{
    {Variant::vit_plain, "vit_plain", "ViT+plain decoder (TransUNet)", false, false, 0},
    {Variant::vit_vb_plain, "vit_vb_plain", "ViT+VB+plain decoder", true, false, 1},
    {Variant::vit_vb_mff, "vit_vb_mff", "ViT+VB+MFF (Proposed)", true, true, 1},
    {Variant::vit_vbfundus_mff, "vit_vbfundus_mff", "ViT+VB (fundus as the input)+MFF", true, true, 3},
}};

const VariantInfo& info(Variant v) {
  for (const auto& i : kVariants) {
    if (i.variant == v) return i;
  }
  throw ConfigError("invalid variant");
}

}  // namespace

std::string_view to_string(Variant v) { return info(v).name; }
std::string_view table_label(Variant v) { return info(v).label; }
bool has_vessel_branch(Variant v) { return info(v).vessel; }
bool has_mff_decoder(Variant v) { return info(v).mff; }
int vessel_input_channels(Variant v) { return info(v).vessel_channels; }

const std::array<Variant, 4>& all_variants() {
  static const std::array<Variant, 4> v{Variant::vit_plain, Variant::vit_vb_plain,
                                        Variant::vit_vb_mff, Variant::vit_vbfundus_mff};
  return v;
}

Variant parse_variant(std::string_view name) {
  std::string valid;
  for (const auto& i : kVariants) {
    if (i.name == name) return i.variant;
    valid += (valid.empty() ? "" : ", ") + std::string(i.name);
  }
  throw ConfigError("unknown variant '" + std::string(name) + "'; valid variants: " + valid);
}

// ----------------------------------------------------------------- config

NetworkConfig NetworkConfig::defaults(Variant v) {
  NetworkConfig c;
  c.variant = v;
  return c;
}

NetworkConfig NetworkConfig::toy(Variant v, int input_size) {
  NetworkConfig c;
  c.variant = v;
  c.input_size = input_size;
  c.patch_grid = input_size / kEncoderStride;
  c.transformer_blocks = 2;
  c.transformer_hidden_dim = 64;
  c.attention_heads = 4;
  c.cnn_stage_channels = {16, 32, 64};
  c.bottleneck_channels = 64;
  c.decoder_channels = {64, 32, 16};
  c.sig_mid_channels = 16;
  c.sig_out_channels = 32;
  c.head_channels = 16;
  c.toy_mode = true;
  return c;
}

std::vector<std::string> NetworkConfig::problems() const {
  std::vector<std::string> p;
  if (input_size <= 0 || input_size % kEncoderStride != 0) {
    p.push_back("input_size " + std::to_string(input_size) +
                " must be a positive multiple of the encoder downsampling factor " +
                std::to_string(kEncoderStride));
  } else if (patch_grid != input_size / kEncoderStride) {
    p.push_back("patch_grid must equal input_size / " + std::to_string(kEncoderStride));
  }
  if (in_channels != 3) p.emplace_back("in_channels must be 3");
  if (transformer_blocks < 1) p.emplace_back("transformer_blocks must be >= 1");
  if (transformer_hidden_dim <= 0 || attention_heads <= 0 ||
      transformer_hidden_dim % attention_heads != 0) {
    p.emplace_back("transformer_hidden_dim must be a positive multiple of attention_heads");
  }
  if (mlp_ratio < 1) p.emplace_back("mlp_ratio must be >= 1");
  if (cnn_stage_channels.size() != 3) {
    p.emplace_back("cnn_stage_channels must list 3 stages (strides 2, 4, 8)");
  }
  for (int ch : cnn_stage_channels) {
    if (ch <= 0) p.emplace_back("cnn_stage_channels must be positive");
  }
  if (bottleneck_channels <= 0) p.emplace_back("bottleneck_channels must be positive");
  for (int i = 0; i < 3; ++i) {
    if (decoder_channels[i] <= 0) p.emplace_back("decoder_channels must be positive");
    if (mff_mid_channels[i] <= 0) p.emplace_back("mff_mid_channels must be positive");
    if (mff_depths[i] < 2) p.emplace_back("mff_depths must be >= 2");
  }
  if (sig_block_count != 4) {
    p.emplace_back("sig_block_count must be 4 (one SIG block per decoder scale 16/8/4/2)");
  }
  if (sig_depth < 2) p.emplace_back("sig_depth must be >= 2");
  if (sig_mid_channels <= 0 || sig_out_channels <= 0) {
    p.emplace_back("sig channel counts must be positive");
  }
  if (head_channels <= 0) p.emplace_back("head_channels must be positive");
  return p;
}

void NetworkConfig::validate() const {
  const auto p = problems();
  if (p.empty()) return;
  std::string msg = "invalid network config: ";
  for (std::size_t i = 0; i < p.size(); ++i) msg += (i ? "; " : "") + p[i];
  throw ConfigError(msg);
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"variant", std::string(to_string(c.variant))},
                     {"input_size", c.input_size},
                     {"in_channels", c.in_channels},
                     {"transformer_blocks", c.transformer_blocks},
                     {"transformer_hidden_dim", c.transformer_hidden_dim},
                     {"attention_heads", c.attention_heads},
                     {"mlp_ratio", c.mlp_ratio},
                     {"patch_grid", c.patch_grid},
                     {"cnn_stage_channels", c.cnn_stage_channels},
                     {"bottleneck_channels", c.bottleneck_channels},
                     {"decoder_channels", c.decoder_channels},
                     {"mff_mid_channels", c.mff_mid_channels},
                     {"mff_depths", c.mff_depths},
                     {"sig_block_count", c.sig_block_count},
                     {"sig_depth", c.sig_depth},
                     {"sig_mid_channels", c.sig_mid_channels},
                     {"sig_out_channels", c.sig_out_channels},
                     {"head_channels", c.head_channels},
                     {"toy_mode", c.toy_mode}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  // Missing keys fall back to the full-scale (or toy) defaults.
  const bool toy = j.value("toy_mode", false);
  const Variant v = parse_variant(j.value("variant", std::string("vit_vb_mff")));
  const int size = j.value("input_size", toy ? 64 : 512);
  NetworkConfig d = toy ? NetworkConfig::toy(v, size) : NetworkConfig::defaults(v);
  d.input_size = size;
  d.patch_grid = size / NetworkConfig::kEncoderStride;
  try {
    d.in_channels = j.value("in_channels", d.in_channels);
    d.transformer_blocks = j.value("transformer_blocks", d.transformer_blocks);
    d.transformer_hidden_dim = j.value("transformer_hidden_dim", d.transformer_hidden_dim);
    d.attention_heads = j.value("attention_heads", d.attention_heads);
    d.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    d.patch_grid = j.value("patch_grid", d.patch_grid);
    d.cnn_stage_channels = j.value("cnn_stage_channels", d.cnn_stage_channels);
    d.bottleneck_channels = j.value("bottleneck_channels", d.bottleneck_channels);
    d.decoder_channels = j.value("decoder_channels", d.decoder_channels);
    d.mff_mid_channels = j.value("mff_mid_channels", d.mff_mid_channels);
    d.mff_depths = j.value("mff_depths", d.mff_depths);
    d.sig_block_count = j.value("sig_block_count", d.sig_block_count);
    d.sig_depth = j.value("sig_depth", d.sig_depth);
    d.sig_mid_channels = j.value("sig_mid_channels", d.sig_mid_channels);
    d.sig_out_channels = j.value("sig_out_channels", d.sig_out_channels);
    d.head_channels = j.value("head_channels", d.head_channels);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
  d.toy_mode = toy;
  c = d;
}

// ----------------------------------------------------------------- thresholds

std::string Multiplier::label() const {
  if (den == 1) return std::to_string(num) + "R";
  return std::to_string(num) + "/" + std::to_string(den) + "R";
}

EvalThresholds EvalThresholds::messidor() {
  return {"messidor", {{1, 8}, {1, 4}, {1, 2}, {1, 1}, {2, 1}}};
}

EvalThresholds EvalThresholds::palm() { return {"palm", {{1, 8}, {1, 4}, {1, 2}, {2, 3}, {1, 1}}}; }

EvalThresholds EvalThresholds::preset(std::string_view name) {
  if (name == "messidor") return messidor();
  if (name == "palm") return palm();
  throw ConfigError("unknown threshold preset '" + std::string(name) + "' (expected messidor|palm)");
}

void EvalThresholds::validate() const {
  if (multipliers.empty()) throw ConfigError("threshold list is empty");
  for (std::size_t i = 0; i < multipliers.size(); ++i) {
    if (multipliers[i].den <= 0 || !(multipliers[i].value() > 0.0)) {
      throw ConfigError("threshold multipliers must be positive");
    }
    if (i > 0 && !(multipliers[i].value() > multipliers[i - 1].value())) {
      throw ConfigError("threshold multipliers must be strictly increasing");
    }
  }
}

std::string_view to_string(Stratum s) {
  switch (s) {
    case Stratum::overall: return "overall";
    case Stratum::normal: return "normal";
    case Stratum::diseased: return "diseased";
  }
  return "?";
}

Stratum parse_stratum(std::string_view text) {
  for (Stratum s : kStrata) {
    if (to_string(s) == text) return s;
  }
  throw DataError("unknown stratum '" + std::string(text) + "'");
}

int StratumCounts::get(Stratum s) const {
  switch (s) {
    case Stratum::overall: return overall;
    case Stratum::normal: return normal;
    case Stratum::diseased: return diseased;
  }
  return 0;
}

int& StratumCounts::get(Stratum s) {
  switch (s) {
    case Stratum::normal: return normal;
    case Stratum::diseased: return diseased;
    default: return overall;
  }
}

double EvalReport::accuracy(std::size_t threshold_index, Stratum s) const {
  const int total = totals.get(s);
  if (total == 0) return 0.0;
  return 100.0 * results.at(threshold_index).hits.get(s) / total;
}

}  // namespace bvit
