#include "rldif/structio.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace rldif {

using nlohmann::json;

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

double parse_column_double(std::string_view line, size_t pos, size_t len, size_t lineno) {
  std::string_view f = trim(line.substr(pos, len));
  double v = 0;
  auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (ec != std::errc() || ptr != f.data() + f.size())
    throw InvalidArgument("bad coordinate on PDB line " + std::to_string(lineno));
  return v;
}

int atom_slot(std::string_view name) {
  if (name == "N") return 0;
  if (name == "CA") return 1;
  if (name == "C") return 2;
  if (name == "O") return 3;
  return -1;
}

struct PendingResidue {
  std::string resname;
  std::array<std::optional<Vec3>, kBackboneAtoms> atoms;
};

}  // namespace

PdbChain parse_pdb(std::string_view content, std::optional<char> chain) {
  using Key = std::pair<int, char>;  // residue number, insertion code
  std::map<Key, PendingResidue> residues;
  std::optional<char> selected = chain;

  size_t lineno = 0;
  size_t start = 0;
  while (start < content.size()) {
    size_t end = content.find('\n', start);
    if (end == std::string_view::npos) end = content.size();
    std::string_view line = content.substr(start, end - start);
    start = end + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    if (line.starts_with("ENDMDL")) break;
    if (!line.starts_with("ATOM  ")) continue;
    if (line.size() < 54)
      throw InvalidArgument("truncated ATOM record on PDB line " + std::to_string(lineno));

    char altloc = line[16];
    if (altloc != ' ' && altloc != 'A') continue;
    char chain_id = line[21];
    if (!selected) selected = chain_id;
    if (chain_id != *selected) continue;

    int slot = atom_slot(trim(line.substr(12, 4)));
    if (slot < 0) continue;

    std::string_view num = trim(line.substr(22, 4));
    int resnum = 0;
    auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), resnum);
    if (ec != std::errc() || p != num.data() + num.size())
      throw InvalidArgument("bad residue number on PDB line " + std::to_string(lineno));
    char icode = line.size() > 26 ? line[26] : ' ';

    auto& res = residues[{resnum, icode}];
    std::string resname(trim(line.substr(17, 3)));
    if (res.resname.empty()) res.resname = resname;
    if (res.atoms[slot]) continue;  // first occurrence wins (blank before 'A' or vice versa)
    res.atoms[slot] = Vec3{parse_column_double(line, 30, 8, lineno),
                           parse_column_double(line, 38, 8, lineno),
                           parse_column_double(line, 46, 8, lineno)};
  }

  if (residues.empty()) throw EmptyChain("no ATOM records for the requested chain");

  std::vector<int> seq;
  Backbone bb;
  bb.chain_id = std::string(1, *selected);
  for (const auto& [key, pending] : residues) {
    int idx = residue_index_from_three_letter(pending.resname);
    if (idx < 0)
      throw UnknownResidue("unknown residue " + pending.resname + " at " + std::to_string(key.first));
    Residue r;
    r.number = key.first;
    r.insertion_code = key.second;
    for (int a = 0; a < kBackboneAtoms; ++a) {
      if (!pending.atoms[a]) {
        static constexpr std::array<const char*, 4> names{"N", "CA", "C", "O"};
        throw MissingBackboneAtom("residue " + pending.resname + " " + std::to_string(key.first) +
                                  " lacks atom " + names[a]);
      }
      r.atoms[a] = *pending.atoms[a];
    }
    seq.push_back(idx);
    bb.residues.push_back(r);
  }
  return {Sequence(std::move(seq)), std::move(bb)};
}

PdbChain read_pdb_file(const std::filesystem::path& path, std::optional<char> chain) {
  return parse_pdb(read_text_file(path), chain);
}

namespace {

// chain_set.jsonl files in the wild carry bare NaN tokens; map them to null.
std::string sanitize_non_json_numbers(std::string_view line) {
  std::string out;
  out.reserve(line.size());
  bool in_string = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (in_string) {
      out.push_back(c);
      if (c == '\\' && i + 1 < line.size()) out.push_back(line[++i]);
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') {
      in_string = true;
      out.push_back(c);
    } else if (line.substr(i, 3) == "NaN") {
      out += "null";
      i += 2;
    } else if (line.substr(i, 9) == "-Infinity") {
      out += "null";
      i += 8;
    } else if (line.substr(i, 8) == "Infinity") {
      out += "null";
      i += 7;
    } else {
      out.push_back(c);
    }
  }
  return out;
}

double coord_value(const json& v) {
  if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (!v.is_number()) throw MalformedLine("coordinate is not a number");
  return v.get<double>();
}

}  // namespace

ChainRecord parse_chain_record(std::string_view json_line) {
  json j;
  try {
    j = json::parse(sanitize_non_json_numbers(json_line));
  } catch (const json::exception& e) {
    throw MalformedLine(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("name") || !j.contains("seq") || !j.contains("coords"))
    throw MalformedLine("record needs name, seq and coords");
  if (!j["name"].is_string() || !j["seq"].is_string() || !j["coords"].is_object())
    throw MalformedLine("wrong field types");

  ChainRecord rec;
  rec.name = j["name"].get<std::string>();
  rec.seq = j["seq"].get<std::string>();
  static constexpr std::array<const char*, 4> atom_keys{"N", "CA", "C", "O"};
  for (int a = 0; a < kBackboneAtoms; ++a) {
    const auto& coords = j["coords"];
    if (!coords.contains(atom_keys[a]) || !coords[atom_keys[a]].is_array())
      throw MalformedLine(std::string("missing coordinate list ") + atom_keys[a]);
    const auto& list = coords[atom_keys[a]];
    if (list.size() != rec.seq.size())
      throw MalformedLine(std::string("coordinate list ") + atom_keys[a] + " has " +
                          std::to_string(list.size()) + " entries for sequence length " +
                          std::to_string(rec.seq.size()));
    rec.coords[a].reserve(list.size());
    for (const auto& xyz : list) {
      if (!xyz.is_array() || xyz.size() != 3) throw MalformedLine("coordinate is not a triple");
      rec.coords[a].push_back({coord_value(xyz[0]), coord_value(xyz[1]), coord_value(xyz[2])});
    }
  }
  return rec;
}

std::string format_chain_record(const ChainRecord& record) {
  json coords = json::object();
  static constexpr std::array<const char*, 4> atom_keys{"N", "CA", "C", "O"};
  for (int a = 0; a < kBackboneAtoms; ++a) {
    json list = json::array();
    for (const auto& v : record.coords[a]) list.push_back({v.x, v.y, v.z});
    coords[atom_keys[a]] = std::move(list);
  }
  json j;
  j["name"] = record.name;
  j["seq"] = record.seq;
  j["coords"] = std::move(coords);
  return j.dump();
}

ChainRecord to_chain_record(const std::string& name, const Sequence& seq, const Backbone& bb) {
  if (seq.size() != bb.size()) throw LengthMismatch("sequence and backbone lengths differ");
  ChainRecord rec;
  rec.name = name;
  rec.seq = seq.to_text();
  for (int a = 0; a < kBackboneAtoms; ++a)
    for (const auto& r : bb.residues) rec.coords[a].push_back(r.atoms[a]);
  return rec;
}

std::vector<const DatasetEntry*> ChainSet::split(Split s) const {
  std::vector<const DatasetEntry*> out;
  for (const auto& e : entries)
    if (e.split == s) out.push_back(&e);
  return out;
}

ChainSet load_chain_set(const std::filesystem::path& jsonl_path,
                        const std::filesystem::path& splits_path) {
  json splits;
  try {
    splits = json::parse(read_text_file(splits_path));
  } catch (const json::exception& e) {
    throw MalformedLine(std::string("splits file: ") + e.what());
  }
  std::unordered_map<std::string, Split> split_of;
  for (Split s : {Split::Train, Split::Validation, Split::Test}) {
    std::string key(split_name(s));
    if (!splits.contains(key)) continue;
    for (const auto& name : splits[key]) split_of[name.get<std::string>()] = s;
  }

  ChainSet out;
  std::set<std::string> seen;
  std::ifstream in(jsonl_path);
  if (!in) throw IoError("cannot open " + jsonl_path.string());
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    ChainRecord rec;
    try {
      rec = parse_chain_record(line);
    } catch (const MalformedLine& e) {
      throw MalformedLine("line " + std::to_string(lineno) + ": " + e.what());
    }
    seen.insert(rec.name);
    auto it = split_of.find(rec.name);
    if (it == split_of.end()) continue;

    bool valid_residues = !rec.seq.empty();
    for (char c : rec.seq) valid_residues = valid_residues && residue_index(c) >= 0;
    if (!valid_residues) {
      ++out.skipped;
      out.warnings.push_back(rec.name + ": non-alphabet residue");
      continue;
    }
    DatasetEntry entry;
    entry.id = rec.name;
    entry.split = it->second;
    entry.sequence = Sequence::from_text(rec.seq);
    auto dot_pos = rec.name.find('.');
    entry.backbone.chain_id = dot_pos == std::string::npos ? "" : rec.name.substr(dot_pos + 1);
    for (size_t i = 0; i < rec.seq.size(); ++i) {
      Residue r;
      r.number = static_cast<int>(i) + 1;
      for (int a = 0; a < kBackboneAtoms; ++a) r.atoms[a] = rec.coords[a][i];
      entry.backbone.residues.push_back(r);
    }
    if (!entry.backbone.all_finite()) {
      ++out.skipped;
      out.warnings.push_back(rec.name + ": non-finite backbone coordinate");
      continue;
    }
    out.entries.push_back(std::move(entry));
  }

  for (const auto& [name, s] : split_of)
    if (!seen.contains(name))
      throw SplitNameNotFound("split '" + std::string(split_name(s)) + "' names unknown chain " + name);
  return out;
}

}  // namespace rldif
