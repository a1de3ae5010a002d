#include "qe/package.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qe/error.hpp"
#include "qe/tensor_file.hpp"

namespace qe {
namespace fs = std::filesystem;
using nlohmann::json;

json scheme_to_json(const QuantScheme& s) {
  return {{"weight_bits", s.weight_bits},
          {"act_bits", s.act_bits},
          {"weight_mode", to_string(s.weight_mode)},
          {"act_mode", to_string(s.act_mode)},
          {"group_size", s.group_size}};
}

QuantScheme scheme_from_json(const json& j) {
  QuantScheme s;
  s.weight_bits = j.at("weight_bits").get<int>();
  s.act_bits = j.at("act_bits").get<int>();
  s.weight_mode = weight_mode_from_string(j.at("weight_mode").get<std::string>());
  s.act_mode = act_mode_from_string(j.at("act_mode").get<std::string>());
  s.group_size = j.at("group_size").get<std::size_t>();
  s.validate();
  return s;
}

namespace {

std::string layer_dir_name(std::size_t index, const std::string& name) {
  std::string safe;
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '.' || c == '_' || c == '-';
    safe.push_back(ok ? c : '_');
  }
  char prefix[16];
  std::snprintf(prefix, sizeof(prefix), "%03zu_", index);
  return prefix + safe;
}

json dims_json(const Tensor2D& t) { return json::array({t.rows(), t.cols()}); }

}  // namespace

void write_package(const std::string& dir, const Package& package) {
  fs::create_directories(dir);
  json layers = json::array();
  for (std::size_t li = 0; li < package.layers.size(); ++li) {
    const PackageLayer& layer = package.layers[li];
    const ExpertPack& p = layer.pack;
    validate_pack(p);
    const std::string sub = layer_dir_name(li, layer.name);
    fs::create_directories(fs::path(dir) / sub);
    auto put = [&](const std::string& file, const RawTensor& t) {
      const std::string rel = sub + "/" + file;
      write_raw_tensor((fs::path(dir) / rel).string(), t);
      return rel;
    };

    const auto& q = p.quantized;
    const bool symmetric = q.scheme.weight_mode == WeightMode::per_output_channel_symmetric;
    json tensors;
    tensors["codes"] = put("codes.qetf", make_int(q.codes, {q.rows, q.cols}, symmetric ? DType::i8 : DType::i32));
    if (symmetric) {
      tensors["scales"] = put("scales.qetf", make_f64(q.scales));
      tensors["zero_points"] = nullptr;
    } else {
      const std::size_t groups = q.groups_per_row();
      tensors["scales"] = put("scales.qetf", make_f64(Tensor2D(q.rows, groups, q.scales)));
      tensors["zero_points"] = put("zero_points.qetf", make_int(q.zero_points, {q.rows, groups}, DType::i32));
    }
    tensors["L_SA"] = put("L_SA.qetf", make_f64(p.shared.adapter.a));
    tensors["L_SB"] = put("L_SB.qetf", make_f64(p.shared.adapter.b));
    tensors["smooth_scale"] = put("smooth_scale.qetf", make_f64(p.shared.smooth_scale));
    json ra = json::array(), rb = json::array();
    for (std::size_t i = 0; i < p.routed.adapters.size(); ++i) {
      ra.push_back(put("L_RA_" + std::to_string(i) + ".qetf", make_f64(p.routed.adapters[i].a)));
      rb.push_back(put("L_RB_" + std::to_string(i) + ".qetf", make_f64(p.routed.adapters[i].b)));
    }
    tensors["L_RA"] = ra;
    tensors["L_RB"] = rb;
    tensors["R"] = p.has_routed() ? json(put("R.qetf", make_f64(p.router.weights))) : json(nullptr);
    tensors["W_f"] = put("W_f.qetf", make_f64(layer.reference_weight));

    json routed_ranks = json::array();
    for (const auto& ad : p.routed.adapters) routed_ranks.push_back(ad.rank());
    json shapes = {{"d_in", p.d_in()}, {"d_out", p.d_out()}};
    json entry = {{"name", layer.name},
                  {"shapes", shapes},
                  {"scheme", scheme_to_json(q.scheme)},
                  {"ranks", {{"shared", p.shared.adapter.rank()}, {"routed", routed_ranks}}},
                  {"tensors", tensors},
                  {"C_s", p.partition.token_independent},
                  {"C_r", p.partition.token_dependent},
                  {"clusters", p.routed.clusters},
                  {"pack_config",
                   {{"k", p.config.k},
                    {"N_r", p.config.n_routed},
                    {"r_s", p.config.rank_shared},
                    {"r_r", p.config.rank_routed},
                    {"seed", p.config.seed}}}};
    layers.push_back(entry);
  }
  json manifest = {{"format", "qe-package"}, {"version", 1}, {"config", package.config}, {"layers", layers}};
  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::trunc);
  if (!out) throw Error("cannot write manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

namespace {

RawTensor load(const fs::path& root, const json& ref, const std::string& member) {
  if (!ref.is_string()) throw InvalidInput("manifest: member " + member + " has no tensor reference");
  const fs::path path = root / ref.get<std::string>();
  if (!fs::exists(path)) throw InvalidInput("manifest: tensor file for " + member + " missing: " + path.string());
  return read_raw_tensor(path.string());
}

void expect_dims(const RawTensor& t, std::vector<std::uint64_t> dims, const std::string& member) {
  if (t.dims != dims) {
    std::ostringstream os;
    os << "manifest: " << member << " has dims [";
    for (std::size_t i = 0; i < t.dims.size(); ++i) os << (i ? "," : "") << t.dims[i];
    os << "], declared [";
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << "]";
    throw InvalidInput(os.str());
  }
}

}  // namespace

Package read_package(const std::string& dir) {
  const fs::path root(dir);
  const fs::path mpath = root / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw ParseError(mpath.string(), 0, "cannot open manifest");
  std::stringstream ss;
  ss << in.rdbuf();
  json manifest;
  try {
    manifest = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ParseError(mpath.string(), e.byte, e.what());
  }

  Package pkg;
  try {
    if (manifest.value("format", "") != "qe-package") throw InvalidInput("manifest: not a qe-package");
    pkg.config = manifest.at("config");
    for (const json& entry : manifest.at("layers")) {
      PackageLayer layer;
      layer.name = entry.at("name").get<std::string>();
      const std::string tag = "layer '" + layer.name + "' ";
      const std::size_t d_in = entry.at("shapes").at("d_in").get<std::size_t>();
      const std::size_t d_out = entry.at("shapes").at("d_out").get<std::size_t>();
      const json& tensors = entry.at("tensors");
      ExpertPack& p = layer.pack;

      QuantizedWeight& q = p.quantized;
      q.scheme = scheme_from_json(entry.at("scheme"));
      q.rows = d_out;
      q.cols = d_in;
      const RawTensor codes = load(root, tensors.at("codes"), tag + "codes");
      expect_dims(codes, {d_out, d_in}, tag + "codes");
      q.codes = to_ints(codes, tensors.at("codes").get<std::string>());
      const std::size_t groups = q.groups_per_row();
      const RawTensor scales = load(root, tensors.at("scales"), tag + "scales");
      if (q.scheme.weight_mode == WeightMode::per_output_channel_symmetric) {
        expect_dims(scales, {d_out}, tag + "scales");
      } else {
        expect_dims(scales, {d_out, groups}, tag + "scales");
        const RawTensor zp = load(root, tensors.at("zero_points"), tag + "zero_points");
        expect_dims(zp, {d_out, groups}, tag + "zero_points");
        q.zero_points = to_ints(zp, tensors.at("zero_points").get<std::string>());
      }
      q.scales = to_doubles(scales, tensors.at("scales").get<std::string>());

      const std::size_t rs = entry.at("ranks").at("shared").get<std::size_t>();
      const RawTensor sa = load(root, tensors.at("L_SA"), tag + "shared.L_SA");
      expect_dims(sa, {d_out, rs}, tag + "shared.L_SA");
      const RawTensor sb = load(root, tensors.at("L_SB"), tag + "shared.L_SB");
      expect_dims(sb, {rs, d_in}, tag + "shared.L_SB");
      p.shared.adapter.a = to_tensor2d(sa, tag + "L_SA");
      p.shared.adapter.b = to_tensor2d(sb, tag + "L_SB");
      const RawTensor sm = load(root, tensors.at("smooth_scale"), tag + "shared.smooth_scale");
      expect_dims(sm, {d_in}, tag + "shared.smooth_scale");
      p.shared.smooth_scale = to_doubles(sm, tag + "smooth_scale");

      const json& ranks = entry.at("ranks").at("routed");
      const json& ra = tensors.at("L_RA");
      const json& rb = tensors.at("L_RB");
      if (ra.size() != ranks.size() || rb.size() != ranks.size()) {
        throw InvalidInput("manifest: " + tag + "routed adapter lists disagree with declared ranks");
      }
      for (std::size_t i = 0; i < ranks.size(); ++i) {
        const std::size_t r = ranks[i].get<std::size_t>();
        const std::string idx = "[" + std::to_string(i) + "]";
        const RawTensor a = load(root, ra[i], tag + "routed.L_RA" + idx);
        expect_dims(a, {d_out, r}, tag + "routed.L_RA" + idx);
        const RawTensor b = load(root, rb[i], tag + "routed.L_RB" + idx);
        expect_dims(b, {r, d_in}, tag + "routed.L_RB" + idx);
        p.routed.adapters.push_back({to_tensor2d(a, tag + "L_RA"), to_tensor2d(b, tag + "L_RB")});
      }
      if (!ranks.empty()) {
        const RawTensor r = load(root, tensors.at("R"), tag + "router");
        expect_dims(r, {d_in, ranks.size()}, tag + "router");
        p.router.weights = to_tensor2d(r, tag + "R");
      }
      const RawTensor wf = load(root, tensors.at("W_f"), tag + "W_f");
      expect_dims(wf, {d_out, d_in}, tag + "W_f");
      layer.reference_weight = to_tensor2d(wf, tag + "W_f");

      p.partition.token_independent = entry.at("C_s").get<ChannelSet>();
      p.partition.token_dependent = entry.at("C_r").get<ChannelSet>();
      p.routed.clusters = entry.at("clusters").get<std::vector<ChannelSet>>();
      const json& pc = entry.at("pack_config");
      p.config.k = pc.at("k").get<std::size_t>();
      p.config.n_routed = pc.at("N_r").get<std::size_t>();
      p.config.rank_shared = pc.at("r_s").get<std::size_t>();
      p.config.rank_routed = pc.at("r_r").get<std::size_t>();
      p.config.seed = pc.at("seed").get<std::uint64_t>();
      p.config.scheme = q.scheme;
      validate_pack(p);
      pkg.layers.push_back(std::move(layer));
    }
  } catch (const json::exception& e) {
    throw ParseError(mpath.string(), 0, std::string("malformed manifest: ") + e.what());
  }
  return pkg;
}

}  // namespace qe
