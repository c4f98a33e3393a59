#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace tdciv::dag {

// One (variable, time) node of an unrolled causal graph, e.g. S[3].
struct NodeRef {
  std::string var;
  int t = 0;
  auto operator<=>(const NodeRef&) const = default;
};

std::string to_string(const NodeRef& n);
// Parses "name[t]"; throws ParseError.
NodeRef parse_node(const std::string& text);

// Causal DAG unrolled over discrete time. Immutable once built (remove_edge
// returns a modified copy), acyclic, and edges never point backward in time.
// Additionally, any node named "Y" may only have "Y" children (the outcome is
// a sink apart from its own future state).
class FullTimeDag {
 public:
  void add_node(const NodeRef& n);
  // Adds endpoints implicitly. Throws ContractError for self-loops or edges
  // pointing backward in time; duplicate edges are ignored.
  void add_edge(const NodeRef& from, const NodeRef& to);

  bool has_node(const NodeRef& n) const { return index_.count(n) != 0; }
  bool has_edge(const NodeRef& from, const NodeRef& to) const;
  FullTimeDag remove_edge(const NodeRef& from, const NodeRef& to) const;

  const std::vector<NodeRef>& nodes() const { return names_; }
  std::size_t edge_count() const;
  std::vector<NodeRef> parents_of(const NodeRef& n) const;
  std::vector<NodeRef> children_of(const NodeRef& n) const;
  int horizon() const { return horizon_; }

  // Cycle and sink-property check; throws ContractError on violation.
  void validate() const;

  // Nodes reachable from n by directed paths (n excluded), sorted.
  std::vector<NodeRef> descendants(const NodeRef& n) const;

  // True iff every path between A and B is blocked given C. A, B, C must be
  // disjoint (ContractError) and known (LookupError).
  bool d_separated(const std::vector<NodeRef>& a, const std::vector<NodeRef>& b,
                   const std::vector<NodeRef>& c) const;

  // When A and B are d-connected given C, returns one open path (a walk whose
  // every interior node passes the chain/fork/collider rule); empty when
  // separated.
  std::vector<NodeRef> connecting_path(const std::vector<NodeRef>& a,
                                       const std::vector<NodeRef>& b,
                                       const std::vector<NodeRef>& c) const;

  // Openness validator for an explicit path (used by tests and verdicts).
  bool is_open_path(const std::vector<NodeRef>& path, const std::vector<NodeRef>& c) const;

 private:
  int id_of(const NodeRef& n) const;
  std::vector<char> ancestors_of_set(const std::vector<int>& seed) const;
  bool reach(const std::vector<int>& src, const std::vector<int>& dst, const std::vector<int>& cond,
             std::vector<NodeRef>* path_out) const;

  std::vector<NodeRef> names_;
  std::map<NodeRef, int> index_;
  std::vector<std::vector<int>> parents_, children_;
  int horizon_ = 0;
};

// Verdict of the three time-varying CIV conditions for (s, w, y | cond):
//   relevance:      s and w are d-connected given cond
//   exclusion:      s and y are d-separated given cond once the w→y edge is removed
//   non_descendant: no member of cond descends from y
// When exclusion fails the witness is an open s–y path in the manipulated
// graph; when non_descendant fails it is the directed y→...→member path. A
// relevance failure has no path to show (the failure is that no open path
// exists), which witness_note explains.
struct CivVerdict {
  bool relevance = false;
  bool exclusion = false;
  bool non_descendant = false;
  std::vector<NodeRef> witness_path;
  std::string witness_note;
  bool all_ok() const { return relevance && exclusion && non_descendant; }
};

CivVerdict check_civ(const FullTimeDag& g, const NodeRef& s, const NodeRef& w, const NodeRef& y,
                     const std::vector<NodeRef>& cond);

// The unrolled benchmark graph. Per step t: S[t]→W[t], Z[t]→W[t], U[t]→W[t],
// X[t]→Z[t], Z[t]→Y[t+1], U[t]→Y[t+1], W[t]→Y[t+1]; each variable feeds its
// own next step; W[t] also feeds X[t+1] and U[t+1]; Y[t]→Y[t+1]. With proxy:
// S[t]→Xp[t]→Z[t] (the proxy is a measured covariate, so it participates in
// the conditioning-set construction like any X member).
FullTimeDag build_paper_dag(int horizon, bool with_proxy);

// Conditioning set {Z[1..t], S[1..t-1], W[1..t-1], Y[2..t]} for step t ≥ 2.
std::vector<NodeRef> paper_civ_conditioning(int t);

// Text format: one edge per line, `name[t] -> name[t+k]`, '#' comments.
FullTimeDag parse_dag_text(const std::string& text);
FullTimeDag read_dag_file(const std::string& path);

}  // namespace tdciv::dag
