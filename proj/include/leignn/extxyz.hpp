#pragma once

#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "leignn/elements.hpp"
#include "leignn/structure.hpp"

namespace leignn {

namespace xyz_detail {

inline std::string format_real(double v) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.17g", v);
  return buffer;
}

inline double parse_real(const std::string& token, const char* context) {
  std::size_t consumed = 0;
  double value = 0;
  try {
    value = std::stod(token, &consumed);
  } catch (const std::exception&) {
    detail::fail(std::string(context) + ": bad real '" + token + "'");
  }
  detail::check(consumed == token.size(),
                std::string(context) + ": trailing characters in '" + token + "'");
  return value;
}

/// One key=value entry of the comment line. `raw` preserves the original
/// token byte-for-byte so unknown keys round-trip losslessly.
struct CommentToken {
  std::string key;
  std::string value;  // unquoted
  std::string raw;
};

inline std::vector<CommentToken> tokenize_comment(const std::string& line) {
  std::vector<CommentToken> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= line.size()) break;
    const std::size_t start = i;
    std::string key;
    while (i < line.size() && line[i] != '=' &&
           !std::isspace(static_cast<unsigned char>(line[i])))
      key.push_back(line[i++]);
    std::string value;
    if (i < line.size() && line[i] == '=') {
      ++i;
      if (i < line.size() && line[i] == '"') {
        ++i;
        while (i < line.size() && line[i] != '"') value.push_back(line[i++]);
        detail::check(i < line.size(), "unterminated quote in comment line");
        ++i;  // closing quote
      } else {
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i])))
          value.push_back(line[i++]);
      }
    }
    tokens.push_back({key, value, line.substr(start, i - start)});
  }
  return tokens;
}

struct PropertyColumn {
  std::string name;
  char type = ' ';
  int width = 0;
};

inline std::vector<PropertyColumn> parse_properties(const std::string& spec) {
  std::vector<PropertyColumn> columns;
  std::stringstream stream(spec);
  std::string field;
  std::vector<std::string> fields;
  while (std::getline(stream, field, ':')) fields.push_back(field);
  detail::check(!fields.empty() && fields.size() % 3 == 0,
                "Properties must be name:type:count triplets");
  for (std::size_t k = 0; k < fields.size(); k += 3) {
    PropertyColumn column;
    column.name = fields[k];
    detail::check(fields[k + 1].size() == 1, "bad Properties type: " + fields[k + 1]);
    column.type = fields[k + 1][0];
    column.width = std::stoi(fields[k + 2]);
    detail::check(column.width >= 1, "bad Properties column count");
    columns.push_back(column);
  }
  return columns;
}

}  // namespace xyz_detail

/// Parse a multi-frame extended XYZ stream. Recognized comment keys:
/// Lattice ("9 reals", rows are lattice vectors), Properties
/// (species:S:1, pos:R:3, optional forces:R:3), energy, pbc ("T T F").
/// Unknown keys are preserved verbatim and re-emitted by the writer.
inline std::vector<Structure> parse_extxyz(std::istream& in) {
  std::vector<Structure> structures;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    // Allow and skip blank separator lines between frames.
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    std::size_t consumed = 0;
    long count = 0;
    try {
      count = std::stol(line, &consumed);
    } catch (const std::exception&) {
      detail::fail("line " + std::to_string(line_number) + ": malformed atom count");
    }
    detail::check(line.find_first_not_of(" \t\r", consumed) == std::string::npos,
                  "line " + std::to_string(line_number) + ": malformed atom count line");
    detail::check(count >= 1, "line " + std::to_string(line_number) + ": atom count must be >= 1");

    detail::check(static_cast<bool>(std::getline(in, line)), "missing comment line");
    ++line_number;
    const auto tokens = xyz_detail::tokenize_comment(line);

    Structure s;
    std::vector<xyz_detail::PropertyColumn> columns = {
        {"species", 'S', 1}, {"pos", 'R', 3}};
    bool saw_pbc = false;
    for (const auto& token : tokens) {
      if (token.key == "Lattice") {
        std::stringstream cell_stream(token.value);
        std::vector<double> values;
        std::string item;
        while (cell_stream >> item)
          values.push_back(xyz_detail::parse_real(item, "Lattice"));
        detail::check(values.size() == 9, "Lattice must hold 9 reals");
        Mat3 cell;
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c)
            cell.m[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] =
                values[static_cast<std::size_t>(3 * r + c)];
        s.cell = cell;
      } else if (token.key == "Properties") {
        columns = xyz_detail::parse_properties(token.value);
      } else if (token.key == "energy") {
        s.energy_label = xyz_detail::parse_real(token.value, "energy");
      } else if (token.key == "pbc") {
        std::stringstream pbc_stream(token.value);
        std::string flag;
        int d = 0;
        while (pbc_stream >> flag && d < 3) {
          detail::check(flag == "T" || flag == "F", "pbc flags must be T or F");
          s.pbc[static_cast<std::size_t>(d++)] = flag == "T";
        }
        detail::check(d == 3, "pbc must hold 3 flags");
        saw_pbc = true;
      } else {
        s.extra_info.push_back(token.raw);
      }
    }
    if (!saw_pbc && s.cell) s.pbc = {true, true, true};

    int expected_columns = 0;
    bool has_species = false, has_pos = false, has_forces = false;
    for (const auto& column : columns) {
      if (column.name == "species") {
        detail::check(column.type == 'S' && column.width == 1, "species must be S:1");
        has_species = true;
      } else if (column.name == "pos") {
        detail::check(column.type == 'R' && column.width == 3, "pos must be R:3");
        has_pos = true;
      } else if (column.name == "forces") {
        detail::check(column.type == 'R' && column.width == 3, "forces must be R:3");
        has_forces = true;
      } else {
        detail::fail("unsupported property column: " + column.name);
      }
      expected_columns += column.width;
    }
    detail::check(has_species && has_pos, "Properties must include species and pos");
    if (has_forces) s.force_labels = std::vector<Vec3>();

    for (long row = 0; row < count; ++row) {
      detail::check(static_cast<bool>(std::getline(in, line)),
                    "unexpected end of file inside a frame");
      ++line_number;
      std::stringstream atom_stream(line);
      std::vector<std::string> fields;
      std::string item;
      while (atom_stream >> item) fields.push_back(item);
      detail::check(static_cast<int>(fields.size()) == expected_columns,
                    "line " + std::to_string(line_number) +
                        ": column count does not match Properties");
      std::size_t cursor = 0;
      for (const auto& column : columns) {
        if (column.name == "species") {
          s.atomic_numbers.push_back(atomic_number_from_symbol(fields[cursor]));
          cursor += 1;
        } else if (column.name == "pos") {
          s.positions.push_back({xyz_detail::parse_real(fields[cursor], "pos"),
                                 xyz_detail::parse_real(fields[cursor + 1], "pos"),
                                 xyz_detail::parse_real(fields[cursor + 2], "pos")});
          cursor += 3;
        } else {
          s.force_labels->push_back({xyz_detail::parse_real(fields[cursor], "forces"),
                                     xyz_detail::parse_real(fields[cursor + 1], "forces"),
                                     xyz_detail::parse_real(fields[cursor + 2], "forces")});
          cursor += 3;
        }
      }
    }
    s.validate();
    structures.push_back(std::move(s));
  }
  return structures;
}

inline std::vector<Structure> parse_extxyz(const std::string& text) {
  std::istringstream stream(text);
  return parse_extxyz(stream);
}

inline std::vector<Structure> read_extxyz_file(const std::string& path) {
  std::ifstream in(path);
  detail::check(in.good(), "cannot open file: " + path);
  return parse_extxyz(in);
}

inline void write_extxyz(std::span<const Structure> structures, std::ostream& out) {
  using xyz_detail::format_real;
  for (const Structure& s : structures) {
    s.validate();
    out << s.size() << "\n";

    std::vector<std::string> tokens;
    if (s.cell) {
      std::string lattice = "Lattice=\"";
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
          lattice += format_real(
              s.cell->m[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]);
          if (r != 2 || c != 2) lattice += " ";
        }
      lattice += "\"";
      tokens.push_back(lattice);
    }
    std::string properties = "Properties=species:S:1:pos:R:3";
    if (s.force_labels) properties += ":forces:R:3";
    tokens.push_back(properties);
    if (s.energy_label) tokens.push_back("energy=" + format_real(*s.energy_label));
    if (s.cell) {
      tokens.push_back(std::string("pbc=\"") + (s.pbc[0] ? "T" : "F") + " " +
                       (s.pbc[1] ? "T" : "F") + " " + (s.pbc[2] ? "T" : "F") + "\"");
    }
    for (const std::string& extra : s.extra_info) tokens.push_back(extra);

    for (std::size_t k = 0; k < tokens.size(); ++k) {
      if (k > 0) out << " ";
      out << tokens[k];
    }
    out << "\n";

    for (std::size_t i = 0; i < s.size(); ++i) {
      out << element_symbol(s.atomic_numbers[i]) << " " << format_real(s.positions[i].x)
          << " " << format_real(s.positions[i].y) << " " << format_real(s.positions[i].z);
      if (s.force_labels) {
        const Vec3& f = (*s.force_labels)[i];
        out << " " << format_real(f.x) << " " << format_real(f.y) << " "
            << format_real(f.z);
      }
      out << "\n";
    }
  }
}

inline std::string write_extxyz(std::span<const Structure> structures) {
  std::ostringstream out;
  write_extxyz(structures, out);
  return out.str();
}

inline void write_extxyz_file(std::span<const Structure> structures,
                              const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  detail::check(out.good(), "cannot open file for writing: " + path);
  write_extxyz(structures, out);
  detail::check(out.good(), "failed writing file: " + path);
}

}  // namespace leignn
