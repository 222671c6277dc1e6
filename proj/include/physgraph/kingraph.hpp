#pragma once
// Physical graph of the bimanual system: hand links, tool and object nodes,
// static bone edges, per-step contact edges, hop distances and the anatomical
// relation masks consumed by the attention bias generator.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "physgraph/geometry.hpp"

namespace physgraph {

enum class Hand : std::uint8_t { Left, Right, None };
enum class NodeRole : std::uint8_t { PalmRoot, FingerLink, Tool, Object };

inline const char* hand_name(Hand h) {
    switch (h) {
        case Hand::Left: return "left";
        case Hand::Right: return "right";
        default: return "none";
    }
}

struct HandSpec {
    Hand side = Hand::Right;
    int fingers = 0;
    int links_per_finger = 0;
};

// Declarative morphology description; parsed from the graph spec file.
struct GraphSpec {
    std::vector<HandSpec> hands;
    bool tool = false;
    bool object = false;
    double node_radius = 0.01;  // meters, default sphere radius per node

    // Convenience builders for the stock morphologies.
    static GraphSpec bimanual(int fingers, int links, bool tool = true, bool object = true);
};

struct BodyNode {
    int id = -1;
    NodeRole role = NodeRole::FingerLink;
    Hand hand = Hand::None;
    int finger = -1;  // 0-based within the hand; -1 unless FingerLink
    int level = -1;   // 0 = most proximal link; -1 unless FingerLink
    double radius = 0.01;
    std::string name;
};

// Hop distance sentinel for pairs in different bone components.
inline constexpr int kUnreachableHop = 1'000'000;

// Edge taxonomy values: 0 disconnected, 1 bone adjacency, 2 contact, 3 self.
enum EdgeType : int {
    kEdgeDisconnected = 0,
    kEdgeBone = 1,
    kEdgeContact = 2,
    kEdgeSelf = 3,
};

struct ContactSet {
    std::vector<std::pair<int, int>> pairs;  // normalized u < v, unique
    int timestep = 0;

    void add(int u, int v);
    bool contains(int u, int v) const;
    void clear() { pairs.clear(); }
};

struct RelationMasks {
    int n = 0;
    std::vector<std::uint8_t> serial;   // n*n, hop <= 1
    std::vector<std::uint8_t> synergy;  // n*n, same hand, same level, different finger

    bool serial_at(int u, int v) const { return serial[static_cast<std::size_t>(u) * n + v] != 0; }
    bool synergy_at(int u, int v) const { return synergy[static_cast<std::size_t>(u) * n + v] != 0; }
};

class KinematicGraph {
public:
    // Static per-episode structure; immutable once built.
    static KinematicGraph build(const GraphSpec& spec);

    // Same physical graph with node ids renumbered: new id of old node u is
    // new_id_of_old[u]. Used by morphology tooling and equivariance checks.
    static KinematicGraph relabel(const KinematicGraph& g, const std::vector<int>& new_id_of_old);

    int size() const { return n_; }
    const std::vector<BodyNode>& nodes() const { return nodes_; }
    const BodyNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    const std::vector<std::pair<int, int>>& bone_edges() const { return bone_edges_; }

    bool bone_adjacent(int u, int v) const {
        return adjacency_[static_cast<std::size_t>(u) * n_ + v] != 0;
    }

    int hop(int u, int v) const { return hop_[static_cast<std::size_t>(u) * n_ + v]; }
    const std::vector<int>& hop_matrix() const { return hop_; }

    // Node id lookups used by file interfaces and the environment.
    int find_node(const std::string& name) const;  // -1 when absent
    std::optional<int> palm_of(Hand h) const;
    std::optional<int> tool_node() const { return tool_; }
    std::optional<int> object_node() const { return object_; }
    int link_node(Hand h, int finger, int level) const;

    const GraphSpec& spec() const { return spec_; }

private:
    void check_id(int id) const;
    friend int edge_type(const KinematicGraph&, const ContactSet&, int, int);
    friend int hop_clipped(const KinematicGraph&, int, int, int);
    friend RelationMasks relation_masks(const KinematicGraph&);

    GraphSpec spec_;
    int n_ = 0;
    std::vector<BodyNode> nodes_;
    std::vector<std::pair<int, int>> bone_edges_;
    std::vector<std::uint8_t> adjacency_;  // n*n
    std::vector<int> hop_;                 // n*n, kUnreachableHop across components
    std::optional<int> tool_;
    std::optional<int> object_;
    std::optional<int> right_palm_;
    std::optional<int> left_palm_;
};

// Eq.-9 precedence: self > contact > bone adjacency > disconnected.
int edge_type(const KinematicGraph& g, const ContactSet& contacts, int u, int v);

// min(hop, d_max); the unreachable sentinel clips to d_max.
int hop_clipped(const KinematicGraph& g, int u, int v, int d_max);

RelationMasks relation_masks(const KinematicGraph& g);

// Sphere-overlap contacts: ||p_u - p_v|| <= r_u + r_v, excluding self pairs and
// bone-adjacent pairs. Radii default to each node's configured radius.
ContactSet detect_contacts(const KinematicGraph& g, const std::vector<Vec3>& positions,
                           const std::vector<double>& radii, int timestep = 0);

}  // namespace physgraph
