#include "tdciv/dag.hpp"

#include <algorithm>
#include <cctype>
#include <deque>
#include <fstream>
#include <functional>
#include <sstream>

#include "tdciv/errors.hpp"

namespace tdciv::dag {

std::string to_string(const NodeRef& n) { return n.var + "[" + std::to_string(n.t) + "]"; }

NodeRef parse_node(const std::string& text) {
  const auto lb = text.find('[');
  const auto rb = text.find(']');
  if (lb == std::string::npos || rb == std::string::npos || rb != text.size() - 1 || lb == 0 ||
      rb <= lb + 1)
    throw ParseError("dag: malformed node '" + text + "', expected name[t]");
  const std::string var = text.substr(0, lb);
  for (char ch : var)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_')
      throw ParseError("dag: invalid variable name in '" + text + "'");
  const std::string num = text.substr(lb + 1, rb - lb - 1);
  try {
    std::size_t used = 0;
    const int t = std::stoi(num, &used);
    if (used != num.size()) throw std::invalid_argument(num);
    return {var, t};
  } catch (const std::exception&) {
    throw ParseError("dag: invalid time index in '" + text + "'");
  }
}

void FullTimeDag::add_node(const NodeRef& n) {
  if (index_.count(n)) return;
  index_[n] = static_cast<int>(names_.size());
  names_.push_back(n);
  parents_.emplace_back();
  children_.emplace_back();
  horizon_ = std::max(horizon_, n.t);
}

void FullTimeDag::add_edge(const NodeRef& from, const NodeRef& to) {
  if (from == to) throw ContractError("dag: self-loop at " + to_string(from));
  if (from.t > to.t)
    throw ContractError("dag: edge " + to_string(from) + " -> " + to_string(to) +
                        " points backward in time");
  add_node(from);
  add_node(to);
  const int a = index_[from], b = index_[to];
  if (std::find(children_[a].begin(), children_[a].end(), b) != children_[a].end()) return;
  children_[a].push_back(b);
  parents_[b].push_back(a);
}

bool FullTimeDag::has_edge(const NodeRef& from, const NodeRef& to) const {
  auto ia = index_.find(from);
  auto ib = index_.find(to);
  if (ia == index_.end() || ib == index_.end()) return false;
  const auto& ch = children_[ia->second];
  return std::find(ch.begin(), ch.end(), ib->second) != ch.end();
}

FullTimeDag FullTimeDag::remove_edge(const NodeRef& from, const NodeRef& to) const {
  if (!has_edge(from, to))
    throw LookupError("dag: no edge " + to_string(from) + " -> " + to_string(to));
  FullTimeDag g = *this;
  const int a = g.index_[from], b = g.index_[to];
  std::erase(g.children_[a], b);
  std::erase(g.parents_[b], a);
  return g;
}

std::size_t FullTimeDag::edge_count() const {
  std::size_t total = 0;
  for (const auto& ch : children_) total += ch.size();
  return total;
}

std::vector<NodeRef> FullTimeDag::parents_of(const NodeRef& n) const {
  std::vector<NodeRef> out;
  for (int p : parents_[id_of(n)]) out.push_back(names_[p]);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<NodeRef> FullTimeDag::children_of(const NodeRef& n) const {
  std::vector<NodeRef> out;
  for (int c : children_[id_of(n)]) out.push_back(names_[c]);
  std::sort(out.begin(), out.end());
  return out;
}

int FullTimeDag::id_of(const NodeRef& n) const {
  auto it = index_.find(n);
  if (it == index_.end()) throw LookupError("dag: unknown node " + to_string(n));
  return it->second;
}

void FullTimeDag::validate() const {
  // Kahn's algorithm; leftovers mean a cycle.
  std::vector<int> indeg(names_.size());
  for (std::size_t v = 0; v < names_.size(); ++v) indeg[v] = static_cast<int>(parents_[v].size());
  std::deque<int> q;
  for (std::size_t v = 0; v < names_.size(); ++v)
    if (indeg[v] == 0) q.push_back(static_cast<int>(v));
  std::size_t seen = 0;
  while (!q.empty()) {
    const int v = q.front();
    q.pop_front();
    ++seen;
    for (int c : children_[v])
      if (--indeg[c] == 0) q.push_back(c);
  }
  if (seen != names_.size()) throw ContractError("dag: cycle detected");

  for (std::size_t v = 0; v < names_.size(); ++v)
    if (names_[v].var == "Y")
      for (int c : children_[v])
        if (names_[c].var != "Y")
          throw ContractError("dag: outcome node " + to_string(names_[v]) +
                              " has non-outcome child " + to_string(names_[c]));
}

std::vector<NodeRef> FullTimeDag::descendants(const NodeRef& n) const {
  std::vector<char> seen(names_.size(), 0);
  std::deque<int> q{id_of(n)};
  std::vector<NodeRef> out;
  while (!q.empty()) {
    const int v = q.front();
    q.pop_front();
    for (int c : children_[v])
      if (!seen[c]) {
        seen[c] = 1;
        out.push_back(names_[c]);
        q.push_back(c);
      }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<char> FullTimeDag::ancestors_of_set(const std::vector<int>& seed) const {
  std::vector<char> mark(names_.size(), 0);
  std::deque<int> q;
  for (int v : seed)
    if (!mark[v]) {
      mark[v] = 1;
      q.push_back(v);
    }
  while (!q.empty()) {
    const int v = q.front();
    q.pop_front();
    for (int p : parents_[v])
      if (!mark[p]) {
        mark[p] = 1;
        q.push_back(p);
      }
  }
  return mark;
}

// Reachability over (node, arrival-direction) states: arriving from a child
// at an unconditioned node continues anywhere; arriving from a parent
// continues to children when unconditioned, and bounces to parents when the
// node is an ancestor of the conditioning set (open collider).
bool FullTimeDag::reach(const std::vector<int>& src, const std::vector<int>& dst,
                        const std::vector<int>& cond, std::vector<NodeRef>* path_out) const {
  const std::size_t nn = names_.size();
  std::vector<char> in_c(nn, 0);
  for (int v : cond) in_c[v] = 1;
  const std::vector<char> anc_c = ancestors_of_set(cond);
  std::vector<char> in_dst(nn, 0);
  for (int v : dst) in_dst[v] = 1;

  // State encoding: node * 2 + dir, dir 0 = arrived from child (up), 1 =
  // arrived from parent (down).
  const auto state = [](int node, int dir) { return node * 2 + dir; };
  std::vector<int> pred(nn * 2, -2);  // -2 unvisited, -1 start
  std::deque<int> q;
  for (int v : src) {
    if (pred[state(v, 0)] == -2) {
      pred[state(v, 0)] = -1;
      q.push_back(state(v, 0));
    }
  }

  int hit = -1;
  while (!q.empty() && hit < 0) {
    const int st = q.front();
    q.pop_front();
    const int v = st / 2;
    const int dir = st % 2;
    if (in_dst[v]) {
      hit = st;
      break;
    }
    auto push = [&](int node, int d2) {
      const int ns = state(node, d2);
      if (pred[ns] == -2) {
        pred[ns] = st;
        q.push_back(ns);
      }
    };
    if (dir == 0) {
      if (!in_c[v]) {
        for (int p : parents_[v]) push(p, 0);
        for (int c : children_[v]) push(c, 1);
      }
    } else {
      if (!in_c[v])
        for (int c : children_[v]) push(c, 1);
      if (anc_c[v])
        for (int p : parents_[v]) push(p, 0);
    }
  }
  if (hit < 0) return false;
  if (path_out) {
    std::vector<NodeRef> rev;
    for (int st = hit; st != -1; st = pred[st]) rev.push_back(names_[st / 2]);
    path_out->assign(rev.rbegin(), rev.rend());
  }
  return true;
}

namespace {
std::vector<int> ids_of(const std::vector<NodeRef>& nodes, const std::map<NodeRef, int>& index) {
  std::vector<int> out;
  out.reserve(nodes.size());
  for (const NodeRef& n : nodes) {
    auto it = index.find(n);
    if (it == index.end()) throw LookupError("dag: unknown node " + to_string(n));
    out.push_back(it->second);
  }
  return out;
}
}  // namespace

bool FullTimeDag::d_separated(const std::vector<NodeRef>& a, const std::vector<NodeRef>& b,
                              const std::vector<NodeRef>& c) const {
  return connecting_path(a, b, c).empty();
}

std::vector<NodeRef> FullTimeDag::connecting_path(const std::vector<NodeRef>& a,
                                                  const std::vector<NodeRef>& b,
                                                  const std::vector<NodeRef>& c) const {
  const std::vector<int> ia = ids_of(a, index_);
  const std::vector<int> ib = ids_of(b, index_);
  const std::vector<int> ic = ids_of(c, index_);
  auto overlap = [](std::vector<int> u, std::vector<int> v) {
    std::sort(u.begin(), u.end());
    std::sort(v.begin(), v.end());
    std::vector<int> inter;
    std::set_intersection(u.begin(), u.end(), v.begin(), v.end(), std::back_inserter(inter));
    return !inter.empty();
  };
  if (overlap(ia, ib) || overlap(ia, ic) || overlap(ib, ic))
    throw ContractError("dag: d-separation query sets must be disjoint");
  if (ia.empty() || ib.empty()) throw ContractError("dag: d-separation query sets must be non-empty");

  std::vector<NodeRef> path;
  if (reach(ia, ib, ic, &path)) return path;
  return {};
}

bool FullTimeDag::is_open_path(const std::vector<NodeRef>& path,
                               const std::vector<NodeRef>& c) const {
  if (path.size() < 2) return false;
  std::vector<char> in_c(names_.size(), 0);
  for (const NodeRef& n : c) in_c[id_of(n)] = 1;
  const std::vector<char> anc_c = ancestors_of_set(ids_of(c, index_));

  for (std::size_t i = 0; i + 1 < path.size(); ++i)
    if (!has_edge(path[i], path[i + 1]) && !has_edge(path[i + 1], path[i])) return false;
  if (in_c[id_of(path.front())] || in_c[id_of(path.back())]) return false;

  for (std::size_t i = 1; i + 1 < path.size(); ++i) {
    const bool into_left = has_edge(path[i - 1], path[i]);
    const bool into_right = has_edge(path[i + 1], path[i]);
    const int v = id_of(path[i]);
    if (into_left && into_right) {
      if (!anc_c[v]) return false;  // closed collider
    } else {
      if (in_c[v]) return false;  // blocked chain or fork
    }
  }
  return true;
}

CivVerdict check_civ(const FullTimeDag& g, const NodeRef& s, const NodeRef& w, const NodeRef& y,
                     const std::vector<NodeRef>& cond) {
  for (const NodeRef& n : {s, w, y}) g.parents_of(n);  // existence check
  for (const NodeRef& n : cond)
    if (n == s || n == w || n == y)
      throw ContractError("dag: conditioning set must exclude " + to_string(n));

  CivVerdict v;
  v.relevance = !g.d_separated({s}, {w}, cond);

  const FullTimeDag manipulated = g.has_edge(w, y) ? g.remove_edge(w, y) : g;
  std::vector<NodeRef> open = manipulated.connecting_path({s}, {y}, cond);
  v.exclusion = open.empty();

  v.non_descendant = true;
  std::vector<NodeRef> desc_witness;
  {
    const std::vector<NodeRef> de = g.descendants(y);
    for (const NodeRef& n : cond)
      if (std::binary_search(de.begin(), de.end(), n)) {
        v.non_descendant = false;
        // Directed path y -> ... -> n as the witness.
        std::vector<NodeRef> stack{y};
        std::vector<NodeRef> best;
        std::function<bool(const NodeRef&)> dfs = [&](const NodeRef& cur) -> bool {
          if (cur == n) {
            best = stack;
            return true;
          }
          for (const NodeRef& ch : g.children_of(cur)) {
            stack.push_back(ch);
            if (dfs(ch)) return true;
            stack.pop_back();
          }
          return false;
        };
        dfs(y);
        desc_witness = best;
        break;
      }
  }

  if (!v.exclusion) {
    v.witness_path = open;
    v.witness_note = "open path between " + to_string(s) + " and " + to_string(y) +
                     " in the graph without " + to_string(w) + " -> " + to_string(y);
  } else if (!v.non_descendant) {
    v.witness_path = desc_witness;
    v.witness_note = "conditioning node descends from " + to_string(y);
  } else if (!v.relevance) {
    v.witness_note = "no open path between " + to_string(s) + " and " + to_string(w) +
                     " under the conditioning set (relevance fails; no path to exhibit)";
  }
  return v;
}

FullTimeDag build_paper_dag(int horizon, bool with_proxy) {
  if (horizon < 2) throw ContractError("dag: horizon must be at least 2");
  FullTimeDag g;
  const int T = horizon;
  for (int t = 1; t <= T; ++t) {
    const NodeRef X{"X", t}, U{"U", t}, S{"S", t}, Z{"Z", t}, W{"W", t}, Yn{"Y", t + 1};
    g.add_edge(X, Z);
    g.add_edge(S, W);
    g.add_edge(Z, W);
    g.add_edge(U, W);
    g.add_edge(Z, Yn);
    g.add_edge(U, Yn);
    g.add_edge(W, Yn);
    if (with_proxy) {
      g.add_edge(S, {"Xp", t});
      g.add_edge({"Xp", t}, Z);
    }
    if (t < T) {
      g.add_edge(X, {"X", t + 1});
      g.add_edge(U, {"U", t + 1});
      g.add_edge(S, {"S", t + 1});
      g.add_edge(Z, {"Z", t + 1});
      g.add_edge(W, {"W", t + 1});
      g.add_edge(W, {"X", t + 1});
      g.add_edge(W, {"U", t + 1});
    }
    if (t >= 2) g.add_edge({"Y", t}, Yn);
  }
  g.validate();
  return g;
}

std::vector<NodeRef> paper_civ_conditioning(int t) {
  if (t < 2) throw ContractError("dag: conditioning helper needs t >= 2");
  std::vector<NodeRef> c;
  for (int j = 1; j <= t; ++j) c.push_back({"Z", j});
  for (int j = 1; j <= t - 1; ++j) c.push_back({"S", j});
  for (int j = 1; j <= t - 1; ++j) c.push_back({"W", j});
  for (int j = 2; j <= t; ++j) c.push_back({"Y", j});
  return c;
}

FullTimeDag parse_dag_text(const std::string& text) {
  FullTimeDag g;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool any_edge = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto arrow = line.find("->");
    if (arrow == std::string::npos)
      throw ParseError("dag: line " + std::to_string(line_no) + ": expected 'a[i] -> b[j]', got '" +
                       line + "'");
    const std::string lhs = trim(line.substr(0, arrow));
    const std::string rhs = trim(line.substr(arrow + 2));
    try {
      g.add_edge(parse_node(lhs), parse_node(rhs));
    } catch (const Error& e) {
      throw ParseError("dag: line " + std::to_string(line_no) + ": " + e.what());
    }
    any_edge = true;
  }
  if (!any_edge) throw ParseError("dag: no edges found");
  g.validate();
  return g;
}

FullTimeDag read_dag_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("dag: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_dag_text(ss.str());
}

}  // namespace tdciv::dag
