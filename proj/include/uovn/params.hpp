#pragma once

#include <map>
#include <string>

#include "uovn/graph.hpp"
#include "uovn/tensor.hpp"

namespace uovn {

struct Param {
    Tensor value;
    bool trainable = true;
};

// Named, ordered parameter registry. Names are unique; iteration order is
// the key order, which keeps optimizer updates and checkpoints stable.
class ParamStore {
  public:
    Param& declare(const std::string& name, Tensor init, bool trainable = true);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;

    std::map<std::string, Param>& all() { return params_; }
    const std::map<std::string, Param>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

  private:
    std::map<std::string, Param> params_;
};

// Binds store parameters as leaves on a graph, one leaf per name, created
// lazily and cached so every use of a parameter shares the same node.
class BoundParams {
  public:
    BoundParams(Graph& g, const ParamStore& store, bool with_grads)
        : graph_(&g), store_(&store), with_grads_(with_grads) {}

    Value operator()(const std::string& name);
    // Pre-binds a name to an existing node (used by verification harnesses
    // that need module parameters to be their own graph leaves).
    void preset(const std::string& name, Value v) { bound_[name] = v; }
    const std::map<std::string, Value>& bound() const { return bound_; }
    Graph& graph() { return *graph_; }

  private:
    Graph* graph_;
    const ParamStore* store_;
    bool with_grads_;
    std::map<std::string, Value> bound_;
};

// Checkpoint directory: one "UOVT" container per entry plus meta.json
// carrying the step count and config hash.
void save_checkpoint(const std::string& dir, const ParamStore& params, const std::map<std::string, Tensor>& extra,
                     std::int64_t step, const std::string& config_hash, const std::string& config_json);
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, Tensor> extra;
    std::int64_t step = 0;
    std::string config_hash;
    std::string config_json;
};
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace uovn
