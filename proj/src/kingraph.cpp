#include "physgraph/kingraph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>

namespace physgraph {

GraphSpec GraphSpec::bimanual(int fingers, int links, bool tool, bool object) {
    GraphSpec s;
    s.hands = {{Hand::Right, fingers, links}, {Hand::Left, fingers, links}};
    s.tool = tool;
    s.object = object;
    return s;
}

void ContactSet::add(int u, int v) {
    if (u == v) throw std::invalid_argument("ContactSet: self pair rejected");
    if (u > v) std::swap(u, v);
    if (!contains(u, v)) pairs.emplace_back(u, v);
}

bool ContactSet::contains(int u, int v) const {
    if (u > v) std::swap(u, v);
    return std::find(pairs.begin(), pairs.end(), std::make_pair(u, v)) != pairs.end();
}

static void validate_spec(const GraphSpec& spec) {
    bool seen_left = false, seen_right = false;
    for (std::size_t i = 0; i < spec.hands.size(); ++i) {
        const auto& h = spec.hands[i];
        if (h.side == Hand::None)
            throw std::invalid_argument("hands[" + std::to_string(i) + "].side must be left or right");
        if (h.fingers <= 0)
            throw std::invalid_argument("hands[" + std::to_string(i) + "].fingers must be >= 1");
        if (h.links_per_finger <= 0)
            throw std::invalid_argument("hands[" + std::to_string(i) +
                                        "].links_per_finger must be >= 1");
        bool& seen = (h.side == Hand::Left) ? seen_left : seen_right;
        if (seen)
            throw std::invalid_argument("duplicate hand declaration: " +
                                        std::string(hand_name(h.side)));
        seen = true;
    }
    if (!(spec.node_radius > 0.0))
        throw std::invalid_argument("node_radius must be > 0");
}

KinematicGraph KinematicGraph::build(const GraphSpec& spec) {
    validate_spec(spec);

    KinematicGraph g;
    g.spec_ = spec;

    // Node order: right palm + right links (finger-major), then left, then
    // tool, then object. Token layout relies on this order.
    std::vector<HandSpec> hands = spec.hands;
    std::stable_sort(hands.begin(), hands.end(), [](const HandSpec& a, const HandSpec& b) {
        return (a.side == Hand::Right) && (b.side != Hand::Right);
    });
    g.spec_.hands = hands;

    auto add_node = [&](NodeRole role, Hand hand, int finger, int level,
                        const std::string& name) {
        BodyNode n;
        n.id = static_cast<int>(g.nodes_.size());
        n.role = role;
        n.hand = hand;
        n.finger = finger;
        n.level = level;
        n.radius = spec.node_radius;
        n.name = name;
        g.nodes_.push_back(n);
        return n.id;
    };

    for (const auto& h : hands) {
        std::string prefix = (h.side == Hand::Right) ? "R" : "L";
        int palm = add_node(NodeRole::PalmRoot, h.side, -1, -1, prefix + ".palm");
        if (h.side == Hand::Right)
            g.right_palm_ = palm;
        else
            g.left_palm_ = palm;
        for (int f = 0; f < h.fingers; ++f) {
            int prev = palm;
            for (int l = 0; l < h.links_per_finger; ++l) {
                int id = add_node(NodeRole::FingerLink, h.side, f, l,
                                  prefix + ".f" + std::to_string(f) + ".l" + std::to_string(l));
                g.bone_edges_.emplace_back(std::min(prev, id), std::max(prev, id));
                prev = id;
            }
        }
    }
    if (spec.tool) g.tool_ = add_node(NodeRole::Tool, Hand::None, -1, -1, "tool");
    if (spec.object) g.object_ = add_node(NodeRole::Object, Hand::None, -1, -1, "object");

    g.n_ = static_cast<int>(g.nodes_.size());
    const int n = g.n_;

    g.adjacency_.assign(static_cast<std::size_t>(n) * n, 0);
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
    for (auto [u, v] : g.bone_edges_) {
        g.adjacency_[static_cast<std::size_t>(u) * n + v] = 1;
        g.adjacency_[static_cast<std::size_t>(v) * n + u] = 1;
        adj[static_cast<std::size_t>(u)].push_back(v);
        adj[static_cast<std::size_t>(v)].push_back(u);
    }

    // All-pairs hops via BFS from every source; the graph is unweighted and sparse.
    g.hop_.assign(static_cast<std::size_t>(n) * n, kUnreachableHop);
    std::deque<int> queue;
    for (int s = 0; s < n; ++s) {
        int* dist = g.hop_.data() + static_cast<std::size_t>(s) * n;
        dist[s] = 0;
        queue.clear();
        queue.push_back(s);
        while (!queue.empty()) {
            int u = queue.front();
            queue.pop_front();
            for (int v : adj[static_cast<std::size_t>(u)]) {
                if (dist[v] == kUnreachableHop) {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    return g;
}

KinematicGraph KinematicGraph::relabel(const KinematicGraph& g,
                                       const std::vector<int>& new_id_of_old) {
    const int n = g.n_;
    if (static_cast<int>(new_id_of_old.size()) != n)
        throw std::invalid_argument("relabel: permutation size mismatch");
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(n), 0);
    for (int v : new_id_of_old) {
        if (v < 0 || v >= n || seen[static_cast<std::size_t>(v)]++)
            throw std::invalid_argument("relabel: not a permutation");
    }

    KinematicGraph out;
    out.spec_ = g.spec_;
    out.n_ = n;
    out.nodes_.resize(static_cast<std::size_t>(n));
    for (int u = 0; u < n; ++u) {
        BodyNode node = g.nodes_[static_cast<std::size_t>(u)];
        node.id = new_id_of_old[static_cast<std::size_t>(u)];
        out.nodes_[static_cast<std::size_t>(node.id)] = node;
    }
    for (auto [u, v] : g.bone_edges_) {
        int a = new_id_of_old[static_cast<std::size_t>(u)];
        int b = new_id_of_old[static_cast<std::size_t>(v)];
        out.bone_edges_.emplace_back(std::min(a, b), std::max(a, b));
    }
    out.adjacency_.assign(static_cast<std::size_t>(n) * n, 0);
    out.hop_.assign(static_cast<std::size_t>(n) * n, 0);
    for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v) {
            int a = new_id_of_old[static_cast<std::size_t>(u)];
            int b = new_id_of_old[static_cast<std::size_t>(v)];
            out.adjacency_[static_cast<std::size_t>(a) * n + b] =
                g.adjacency_[static_cast<std::size_t>(u) * n + v];
            out.hop_[static_cast<std::size_t>(a) * n + b] =
                g.hop_[static_cast<std::size_t>(u) * n + v];
        }
    auto map_opt = [&](const std::optional<int>& o) {
        return o ? std::optional<int>(new_id_of_old[static_cast<std::size_t>(*o)]) : std::nullopt;
    };
    out.tool_ = map_opt(g.tool_);
    out.object_ = map_opt(g.object_);
    out.right_palm_ = map_opt(g.right_palm_);
    out.left_palm_ = map_opt(g.left_palm_);
    return out;
}

void KinematicGraph::check_id(int id) const {
    if (id < 0 || id >= n_)
        throw std::out_of_range("node id " + std::to_string(id) + " out of range [0," +
                                std::to_string(n_) + ")");
}

int KinematicGraph::find_node(const std::string& name) const {
    for (const auto& node : nodes_)
        if (node.name == name) return node.id;
    return -1;
}

std::optional<int> KinematicGraph::palm_of(Hand h) const {
    return h == Hand::Right ? right_palm_ : (h == Hand::Left ? left_palm_ : std::nullopt);
}

int KinematicGraph::link_node(Hand h, int finger, int level) const {
    for (const auto& node : nodes_)
        if (node.role == NodeRole::FingerLink && node.hand == h && node.finger == finger &&
            node.level == level)
            return node.id;
    return -1;
}

int edge_type(const KinematicGraph& g, const ContactSet& contacts, int u, int v) {
    g.check_id(u);
    g.check_id(v);
    if (u == v) return kEdgeSelf;
    if (contacts.contains(u, v)) return kEdgeContact;
    if (g.bone_adjacent(u, v)) return kEdgeBone;
    return kEdgeDisconnected;
}

int hop_clipped(const KinematicGraph& g, int u, int v, int d_max) {
    g.check_id(u);
    g.check_id(v);
    if (d_max < 1) throw std::invalid_argument("hop_clipped: d_max must be >= 1");
    return std::min(g.hop(u, v), d_max);
}

RelationMasks relation_masks(const KinematicGraph& g) {
    const int n = g.size();
    RelationMasks m;
    m.n = n;
    m.serial.assign(static_cast<std::size_t>(n) * n, 0);
    m.synergy.assign(static_cast<std::size_t>(n) * n, 0);
    for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
            std::size_t idx = static_cast<std::size_t>(u) * n + v;
            if (g.hop(u, v) <= 1) m.serial[idx] = 1;
            const BodyNode& a = g.node(u);
            const BodyNode& b = g.node(v);
            if (u != v && a.role == NodeRole::FingerLink && b.role == NodeRole::FingerLink &&
                a.hand == b.hand && a.level == b.level && a.finger != b.finger)
                m.synergy[idx] = 1;
        }
    }
    return m;
}

ContactSet detect_contacts(const KinematicGraph& g, const std::vector<Vec3>& positions,
                           const std::vector<double>& radii, int timestep) {
    const int n = g.size();
    if (static_cast<int>(positions.size()) != n || static_cast<int>(radii.size()) != n)
        throw std::invalid_argument("detect_contacts: positions/radii size must match node count");
    for (int i = 0; i < n; ++i) {
        const Vec3& p = positions[static_cast<std::size_t>(i)];
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
            throw std::invalid_argument("detect_contacts: non-finite position for node " +
                                        g.node(i).name);
        if (!(radii[static_cast<std::size_t>(i)] > 0.0))
            throw std::invalid_argument("detect_contacts: radius must be > 0 for node " +
                                        g.node(i).name);
    }

    ContactSet out;
    out.timestep = timestep;
    for (int u = 0; u < n; ++u) {
        for (int v = u + 1; v < n; ++v) {
            if (g.bone_adjacent(u, v)) continue;
            double rsum = radii[static_cast<std::size_t>(u)] + radii[static_cast<std::size_t>(v)];
            if ((positions[static_cast<std::size_t>(u)] - positions[static_cast<std::size_t>(v)])
                    .norm2() <= rsum * rsum)
                out.pairs.emplace_back(u, v);
        }
    }
    return out;
}

}  // namespace physgraph
