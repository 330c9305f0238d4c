#pragma once

// Checkpoint files: one line of JSON (the manifest), then MMF1 blocks, one per
// parameter tensor. Manifest entry "tensors" lists {name, offset, dims}; offsets
// count bytes from the first byte after the manifest's newline.

#include <Eigen/Dense>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mamover/common.hpp"
#include "mamover/mmf.hpp"

namespace mamover {

struct Checkpoint {
  nlohmann::json meta;  // model kind, architecture, free-form info
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> tensors;

  void add(std::string name, const Eigen::MatrixXd& m) {
    names.push_back(std::move(name));
    tensors.push_back(m);
  }

  /// Append every parameter of a model, in for_each_param order, as p<k>.
  template <class M>
  void add_params(const std::string& prefix, const M& model) {
    model.for_each_param([&](const auto& a) {
      Eigen::MatrixXd m = Eigen::Map<const Eigen::MatrixXd>(a.data(), a.rows(), a.cols());
      add(prefix + "." + std::to_string(names.size()), m);
    });
  }

  const Eigen::MatrixXd& get(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i];
    throw Error("checkpoint: missing tensor " + name);
  }

  /// Fill a model of matching architecture from the tensors named prefix.*, in order.
  template <class M>
  void load_params(const std::string& prefix, M& model) const {
    std::size_t i = 0;
    auto next = [&]() -> const Eigen::MatrixXd& {
      while (i < names.size() && names[i].rfind(prefix + ".", 0) != 0) ++i;
      require(i < names.size(), "checkpoint: too few tensors for " + prefix);
      return tensors[i++];
    };
    model.for_each_param([&](auto& a) {
      const auto& m = next();
      require(m.rows() == a.rows() && m.cols() == a.cols(), "checkpoint: tensor shape mismatch in " + prefix);
      for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = m.data()[k];
    });
  }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ostringstream blocks;
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    const auto& m = ck.tensors[i];
    auto offset = static_cast<std::uint64_t>(blocks.tellp());
    // Row-major payload with dims (rows, cols).
    std::vector<double> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
    std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    mmf::write_block(blocks, dims, data);
    entries.push_back({{"name", ck.names[i]}, {"offset", offset}, {"dims", dims}});
  }
  nlohmann::json manifest = ck.meta;
  manifest["format"] = "mamover-checkpoint-1";
  manifest["tensors"] = entries;
  auto os = mmf::open_out(path);
  os << manifest.dump() << '\n';
  auto b = blocks.str();
  os.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!os) throw Error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto is = mmf::open_in(path);
  std::string line;
  if (!std::getline(is, line)) throw Error("checkpoint: empty file: " + path);
  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: bad manifest: ") + e.what());
  }
  if (ck.meta.value("format", "") != "mamover-checkpoint-1") throw Error("checkpoint: unknown format in " + path);
  auto base = is.tellg();
  for (const auto& e : ck.meta.at("tensors")) {
    is.seekg(base + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    auto b = mmf::read_block(is);
    require(b.dims.size() == 2, "checkpoint: tensors must be rank 2");
    Eigen::MatrixXd m(b.dims[0], b.dims[1]);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = b.data[static_cast<std::size_t>(r * m.cols() + c)];
    ck.names.push_back(e.at("name"));
    ck.tensors.push_back(std::move(m));
  }
  ck.meta.erase("tensors");
  return ck;
}

}  // namespace mamover
