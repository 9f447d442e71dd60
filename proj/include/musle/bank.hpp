#pragma once

// Run configuration (file-parseable), the prototype bank holding per
// (class, scale) mixtures and membership nets plus the shared graph nets,
// and the versioned binary bank format.

#include <cstring>
#include <fstream>
#include <sstream>

#include "musle/gmm.hpp"
#include "musle/stgraph.hpp"
#include "musle/subgraph.hpp"
#include "musle/synthgen.hpp"

namespace musle {

struct RunConfig {
  int L = 4;
  int T = 16;
  int M = 8;
  int D_vis = 64;
  std::vector<int> scales = {3, 4, 5};
  int K_init = 6;
  double th = 0.02;
  double lambda = 0.05;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double lr_decay = 0.1;
  int lr_decay_period = 20;
  int epochs = 50;
  int d_phi = 64;
  int d_coord = 32;
  int d_edge_c = 32;
  int coord_hidden = 64;
  int edge_hidden = 64;
  int membership_hidden = 64;
  int subgraph_budget = 2048;
  int test_subgraph_budget = 0;  // 0: use subgraph_budget
  int batch_size = 32;
  int steps_per_cell = 24;   // optimization steps per (class, scale) per epoch
  int videos_per_step = 4;   // videos sampled per optimization step
  double ema_decay = 0.9;
  double var_floor = 1e-6;
  bool full_covariance = false;
  std::uint64_t seed = 1;

  GraphConfig graph_config() const {
    GraphConfig g;
    g.D_vis = D_vis;
    g.T = T;
    g.d_phi = d_phi;
    g.d_coord = d_coord;
    g.d_edge_c = d_edge_c;
    g.coord_hidden = coord_hidden;
    g.edge_hidden = edge_hidden;
    return g;
  }

  int eval_budget() const { return test_subgraph_budget > 0 ? test_subgraph_budget : subgraph_budget; }

  void validate() const {
    auto req = [](bool ok, const char* what) {
      if (!ok) throw UsageError(std::string("config: ") + what);
    };
    req(L > 0 && T > 0 && M > 0 && D_vis > 0, "L, T, M, D_vis must be positive");
    req(!scales.empty(), "scales must be non-empty");
    for (int s : scales) req(s >= 3 && s <= 5, "scales must lie in {3,4,5}");
    req(K_init >= 1, "K_init must be >= 1");
    req(th >= 0.0 && th < 1.0, "th must be in [0,1)");
    req(lambda >= 0.0, "lambda must be >= 0");
    req(lr > 0.0, "lr must be > 0");
    req(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0,1)");
    req(weight_decay >= 0.0, "weight_decay must be >= 0");
    req(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must be in (0,1]");
    req(lr_decay_period >= 0, "lr_decay_period must be >= 0");
    req(epochs >= 1, "epochs must be >= 1");
    req(d_phi > 0 && d_coord > 0 && d_edge_c > 0, "feature dims must be positive");
    req(coord_hidden > 0 && edge_hidden > 0 && membership_hidden > 0, "hidden dims must be positive");
    req(subgraph_budget >= 1, "subgraph_budget must be >= 1");
    req(test_subgraph_budget >= 0, "test_subgraph_budget must be >= 0");
    req(batch_size >= 1, "batch_size must be >= 1");
    req(steps_per_cell >= 1, "steps_per_cell must be >= 1");
    req(videos_per_step >= 1, "videos_per_step must be >= 1");
    req(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay must be in [0,1)");
    req(var_floor > 0.0, "var_floor must be > 0");
  }

  ad::OptimizerConfig optimizer() const {
    ad::OptimizerConfig o;
    o.learning_rate = lr;
    o.momentum = momentum;
    o.weight_decay = weight_decay;
    o.lr_decay = lr_decay;
    o.lr_decay_period = lr_decay_period;
    o.epochs = epochs;
    return o;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"L", L},
                          {"T", T},
                          {"M", M},
                          {"D_vis", D_vis},
                          {"scales", scales},
                          {"K_init", K_init},
                          {"th", th},
                          {"lambda", lambda},
                          {"lr", lr},
                          {"momentum", momentum},
                          {"weight_decay", weight_decay},
                          {"lr_decay", lr_decay},
                          {"lr_decay_period", lr_decay_period},
                          {"epochs", epochs},
                          {"d_phi", d_phi},
                          {"d_coord", d_coord},
                          {"d_edge_c", d_edge_c},
                          {"coord_hidden", coord_hidden},
                          {"edge_hidden", edge_hidden},
                          {"membership_hidden", membership_hidden},
                          {"subgraph_budget", subgraph_budget},
                          {"test_subgraph_budget", test_subgraph_budget},
                          {"batch_size", batch_size},
                          {"steps_per_cell", steps_per_cell},
                          {"videos_per_step", videos_per_step},
                          {"ema_decay", ema_decay},
                          {"var_floor", var_floor},
                          {"full_covariance", full_covariance},
                          {"seed", seed}};
  }
};

namespace config_detail {

inline std::vector<int> parse_int_list(const nlohmann::json& j) {
  std::vector<int> out;
  if (j.is_array()) {
    for (const auto& x : j) out.push_back(x.get<int>());
    return out;
  }
  std::stringstream ss(j.get<std::string>());
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

template <typename Apply>
inline void parse_config_text(const std::string& path, Apply&& apply) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();

  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config: bad JSON in '" + path + "': " + e.what());
    }
    for (const auto& [key, value] : j.items()) apply(key, value);
    return;
  }

  std::stringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto not_ws = line.find_first_not_of(" \t\r");
    if (not_ws == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config: " + path + ":" + std::to_string(line_no) + ": expected key = value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw UsageError("config: " + path + ":" + std::to_string(line_no) + ": empty key or value");
    }
    nlohmann::json jv;
    try {
      jv = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
      jv = value;  // bare string (e.g. comma lists)
    }
    apply(key, jv);
  }
}

}  // namespace config_detail

inline RunConfig run_config_from_file(const std::string& path) {
  RunConfig cfg;
  config_detail::parse_config_text(path, [&](const std::string& key, const nlohmann::json& v) {
    using config_detail::parse_int_list;
    if (key == "L") cfg.L = v.get<int>();
    else if (key == "T") cfg.T = v.get<int>();
    else if (key == "M") cfg.M = v.get<int>();
    else if (key == "D_vis") cfg.D_vis = v.get<int>();
    else if (key == "scales") cfg.scales = parse_int_list(v);
    else if (key == "K_init") cfg.K_init = v.get<int>();
    else if (key == "th") cfg.th = v.get<double>();
    else if (key == "lambda") cfg.lambda = v.get<double>();
    else if (key == "lr") cfg.lr = v.get<double>();
    else if (key == "momentum") cfg.momentum = v.get<double>();
    else if (key == "weight_decay") cfg.weight_decay = v.get<double>();
    else if (key == "lr_decay") cfg.lr_decay = v.get<double>();
    else if (key == "lr_decay_period") cfg.lr_decay_period = v.get<int>();
    else if (key == "epochs") cfg.epochs = v.get<int>();
    else if (key == "d_phi") cfg.d_phi = v.get<int>();
    else if (key == "d_coord") cfg.d_coord = v.get<int>();
    else if (key == "d_edge_c") cfg.d_edge_c = v.get<int>();
    else if (key == "coord_hidden") cfg.coord_hidden = v.get<int>();
    else if (key == "edge_hidden") cfg.edge_hidden = v.get<int>();
    else if (key == "membership_hidden") cfg.membership_hidden = v.get<int>();
    else if (key == "subgraph_budget") cfg.subgraph_budget = v.get<int>();
    else if (key == "test_subgraph_budget") cfg.test_subgraph_budget = v.get<int>();
    else if (key == "batch_size") cfg.batch_size = v.get<int>();
    else if (key == "steps_per_cell") cfg.steps_per_cell = v.get<int>();
    else if (key == "videos_per_step") cfg.videos_per_step = v.get<int>();
    else if (key == "ema_decay") cfg.ema_decay = v.get<double>();
    else if (key == "var_floor") cfg.var_floor = v.get<double>();
    else if (key == "full_covariance") cfg.full_covariance = v.get<bool>();
    else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
    else throw UsageError("config: unknown key '" + key + "'");
  });
  cfg.validate();
  return cfg;
}

inline GeneratorConfig generator_config_from_file(const std::string& path) {
  GeneratorConfig cfg;
  config_detail::parse_config_text(path, [&](const std::string& key, const nlohmann::json& v) {
    using config_detail::parse_int_list;
    if (key == "num_classes") cfg.num_classes = v.get<int>();
    else if (key == "train_per_class") cfg.train_per_class = v.get<int>();
    else if (key == "test_per_class") cfg.test_per_class = v.get<int>();
    else if (key == "L") cfg.L = v.get<int>();
    else if (key == "T") cfg.T = v.get<int>();
    else if (key == "M") cfg.M = v.get<int>();
    else if (key == "D_vis") cfg.D_vis = v.get<int>();
    else if (key == "distractor_pool_size") cfg.distractor_pool_size = v.get<int>();
    else if (key == "variants_per_class") cfg.variants_per_class = v.get<int>();
    else if (key == "motif_sizes") cfg.motif_sizes = parse_int_list(v);
    else if (key == "feature_noise_sigma") cfg.feature_noise_sigma = v.get<double>();
    else if (key == "coord_noise_sigma") cfg.coord_noise_sigma = v.get<double>();
    else if (key == "bg_feature_sigma") cfg.bg_feature_sigma = v.get<double>();
    else if (key == "archetype_radius") cfg.archetype_radius = v.get<double>();
    else if (key == "couple_extensions") cfg.couple_extensions = v.get<bool>();
    else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
    else throw UsageError("generator config: unknown key '" + key + "'");
  });
  return cfg;
}

// ---- prototype bank ----

struct BankCell {
  MembershipNetRef net;
  MixtureParams ema;
  std::vector<int> k_history;
};

struct PrototypeBank {
  RunConfig config;
  int num_classes = 0;
  ad::ParamStore params;                        // graph nets + membership nets
  std::map<std::pair<int, int>, BankCell> cells;  // keyed by (class, scale)

  GraphConfig graph_config() const { return config.graph_config(); }

  const BankCell& cell(int class_id, int scale) const {
    auto it = cells.find({class_id, scale});
    if (it == cells.end()) {
      throw DataError("bank: no cell for class " + std::to_string(class_id) + " scale " +
                      std::to_string(scale));
    }
    return it->second;
  }
};

inline PrototypeBank make_bank(const RunConfig& cfg, int num_classes) {
  cfg.validate();
  PrototypeBank bank;
  bank.config = cfg;
  bank.num_classes = num_classes;
  const GraphConfig g = cfg.graph_config();
  init_graph_params(bank.params, g, cfg.seed);
  for (int c = 0; c < num_classes; ++c) {
    for (int s : cfg.scales) {
      BankCell cell;
      const int dx = subgraph_dim(g, s);
      cell.net = make_membership_net(bank.params, c, s, dx, cfg.membership_hidden, cfg.K_init,
                                     cfg.seed);
      cell.ema = MixtureParams::init(cfg.K_init, dx, cfg.full_covariance);
      cell.k_history.push_back(cfg.K_init);
      bank.cells[{c, s}] = std::move(cell);
    }
  }
  return bank;
}

// ---- binary persistence ----

namespace bankio {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffULL));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_i32(std::ostream& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }

inline void put_doubles(std::ostream& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  for (double x : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, 8);
    put_u64(out, bits);
  }
}

inline void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void put_tensor(std::ostream& out, const ad::Tensor& t) {
  put_i32(out, t.rows);
  put_i32(out, t.cols);
  put_doubles(out, t.v);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError("bank: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& in) {
  const std::uint64_t lo = get_u32(in);
  const std::uint64_t hi = get_u32(in);
  return lo | (hi << 32);
}

inline std::int32_t get_i32(std::istream& in) { return static_cast<std::int32_t>(get_u32(in)); }

inline std::vector<double> get_doubles(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  std::vector<double> v(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint64_t bits = get_u64(in);
    std::memcpy(&v[i], &bits, 8);
  }
  return v;
}

inline std::string get_string(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw DataError("bank: truncated file");
  return s;
}

inline ad::Tensor get_tensor(std::istream& in) {
  const int rows = get_i32(in);
  const int cols = get_i32(in);
  ad::Tensor t(rows, cols);
  t.v = get_doubles(in);
  if (static_cast<int>(t.v.size()) != rows * cols) throw DataError("bank: tensor size mismatch");
  return t;
}

}  // namespace bankio

inline constexpr char kBankMagic[] = "MUSLEBANK";

inline void save_bank(const PrototypeBank& bank, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_bank: cannot open '" + path + "'");
  using namespace bankio;

  out.write(kBankMagic, 9);
  put_u32(out, 1);  // format_version
  put_string(out, bank.config.to_json().dump());
  put_i32(out, bank.num_classes);
  put_u32(out, static_cast<std::uint32_t>(bank.config.scales.size()));
  const GraphConfig g = bank.graph_config();
  for (int s : bank.config.scales) {
    put_i32(out, s);
    put_i32(out, subgraph_dim(g, s));  // D_x echo per scale
  }
  put_i32(out, g.D_vis);
  put_i32(out, g.T);
  put_i32(out, g.d_phi);
  put_i32(out, g.d_coord);
  put_i32(out, g.d_edge_c);
  put_u32(out, bank.config.full_covariance ? 1 : 0);

  const auto gnames = graph_param::names();
  put_u32(out, static_cast<std::uint32_t>(gnames.size()));
  for (const auto& name : gnames) {
    put_string(out, name);
    put_tensor(out, bank.params.value(name));
  }

  put_u32(out, static_cast<std::uint32_t>(bank.cells.size()));
  for (const auto& [key, cell] : bank.cells) {
    put_i32(out, key.first);
    put_i32(out, key.second);
    put_i32(out, cell.ema.K);
    put_i32(out, cell.ema.D);
    put_u32(out, cell.ema.full ? 1 : 0);
    put_doubles(out, cell.ema.weights);
    put_doubles(out, cell.ema.means);
    put_doubles(out, cell.ema.vars);
    if (cell.ema.full) put_doubles(out, cell.ema.cov);
    put_u32(out, static_cast<std::uint32_t>(cell.k_history.size()));
    for (int k : cell.k_history) put_i32(out, k);
    put_i32(out, cell.net.in_dim);
    put_i32(out, cell.net.hidden);
    put_tensor(out, bank.params.value(cell.net.w1));
    put_tensor(out, bank.params.value(cell.net.b1));
    put_tensor(out, bank.params.value(cell.net.w2));
    put_tensor(out, bank.params.value(cell.net.b2));
  }
  if (!out) throw DataError("save_bank: write failed for '" + path + "'");
}

inline PrototypeBank load_bank(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_bank: cannot open '" + path + "'");
  using namespace bankio;

  char magic[9];
  in.read(magic, 9);
  if (!in || std::memcmp(magic, kBankMagic, 9) != 0) {
    throw DataError("load_bank: '" + path + "' is not a prototype bank");
  }
  const std::uint32_t version = get_u32(in);
  if (version != 1) throw DataError("load_bank: unsupported format_version");

  PrototypeBank bank;
  const std::string cfg_json = get_string(in);
  {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(cfg_json);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("load_bank: bad config echo: ") + e.what());
    }
    RunConfig c;
    c.L = j.at("L").get<int>();
    c.T = j.at("T").get<int>();
    c.M = j.at("M").get<int>();
    c.D_vis = j.at("D_vis").get<int>();
    c.scales = j.at("scales").get<std::vector<int>>();
    c.K_init = j.at("K_init").get<int>();
    c.th = j.at("th").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.lr = j.at("lr").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.lr_decay = j.at("lr_decay").get<double>();
    c.lr_decay_period = j.at("lr_decay_period").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.d_phi = j.at("d_phi").get<int>();
    c.d_coord = j.at("d_coord").get<int>();
    c.d_edge_c = j.at("d_edge_c").get<int>();
    c.coord_hidden = j.at("coord_hidden").get<int>();
    c.edge_hidden = j.at("edge_hidden").get<int>();
    c.membership_hidden = j.at("membership_hidden").get<int>();
    c.subgraph_budget = j.at("subgraph_budget").get<int>();
    c.test_subgraph_budget = j.at("test_subgraph_budget").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.steps_per_cell = j.at("steps_per_cell").get<int>();
    c.videos_per_step = j.at("videos_per_step").get<int>();
    c.ema_decay = j.at("ema_decay").get<double>();
    c.var_floor = j.at("var_floor").get<double>();
    c.full_covariance = j.at("full_covariance").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    bank.config = c;
  }
  bank.num_classes = get_i32(in);
  const std::uint32_t n_scales = get_u32(in);
  const GraphConfig g = bank.graph_config();
  if (n_scales != bank.config.scales.size()) throw DataError("load_bank: scale count mismatch");
  for (std::uint32_t i = 0; i < n_scales; ++i) {
    const int s = get_i32(in);
    const int dx = get_i32(in);
    if (s != bank.config.scales[i] || dx != subgraph_dim(g, s)) {
      throw DataError("load_bank: D_x echo does not match config");
    }
  }
  if (get_i32(in) != g.D_vis || get_i32(in) != g.T || get_i32(in) != g.d_phi ||
      get_i32(in) != g.d_coord || get_i32(in) != g.d_edge_c) {
    throw DataError("load_bank: graph dims echo does not match config");
  }
  const bool full = get_u32(in) != 0;
  if (full != bank.config.full_covariance) throw DataError("load_bank: covariance mode mismatch");

  const std::uint32_t n_graph = get_u32(in);
  for (std::uint32_t i = 0; i < n_graph; ++i) {
    const std::string name = get_string(in);
    bank.params.create(name, get_tensor(in));
  }

  const std::uint32_t n_cells = get_u32(in);
  for (std::uint32_t i = 0; i < n_cells; ++i) {
    const int class_id = get_i32(in);
    const int scale = get_i32(in);
    BankCell cell;
    cell.ema.K = get_i32(in);
    cell.ema.D = get_i32(in);
    cell.ema.full = get_u32(in) != 0;
    cell.ema.weights = get_doubles(in);
    cell.ema.means = get_doubles(in);
    cell.ema.vars = get_doubles(in);
    if (cell.ema.full) cell.ema.cov = get_doubles(in);
    const std::uint32_t hist = get_u32(in);
    for (std::uint32_t h = 0; h < hist; ++h) cell.k_history.push_back(get_i32(in));
    const std::string base = "memb/c" + std::to_string(class_id) + "/s" + std::to_string(scale);
    cell.net.w1 = base + "/W1";
    cell.net.b1 = base + "/b1";
    cell.net.w2 = base + "/W2";
    cell.net.b2 = base + "/b2";
    cell.net.in_dim = get_i32(in);
    cell.net.hidden = get_i32(in);
    bank.params.create(cell.net.w1, get_tensor(in));
    bank.params.create(cell.net.b1, get_tensor(in));
    bank.params.create(cell.net.w2, get_tensor(in));
    bank.params.create(cell.net.b2, get_tensor(in));
    bank.cells[{class_id, scale}] = std::move(cell);
  }
  return bank;
}

}  // namespace musle
