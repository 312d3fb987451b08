#pragma once

// Reader for the flat TOML subset used by training configs: `[table]`
// headers, `key = value` pairs with strings, integers, floats, booleans and
// one-line arrays of those, and `#` comments. Keys are addressed as
// "table.key"; keys before the first header have no prefix.

#include <charconv>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "taxalign/errors.hpp"
#include "taxalign/text.hpp"

namespace taxalign::toml {

struct Value;
using Array = std::vector<Value>;

struct Value {
    std::variant<std::string, std::int64_t, double, bool, Array> data;

    [[nodiscard]] bool is_string() const { return std::holds_alternative<std::string>(data); }
    [[nodiscard]] bool is_integer() const { return std::holds_alternative<std::int64_t>(data); }
    [[nodiscard]] bool is_float() const { return std::holds_alternative<double>(data); }
    [[nodiscard]] bool is_bool() const { return std::holds_alternative<bool>(data); }
    [[nodiscard]] bool is_array() const { return std::holds_alternative<Array>(data); }
};

class Document {
public:
    [[nodiscard]] bool contains(const std::string& key) const { return values_.contains(key); }
    [[nodiscard]] const std::map<std::string, Value>& values() const noexcept { return values_; }

    void set(const std::string& key, Value v, std::size_t line) {
        if (!values_.emplace(key, std::move(v)).second) throw parse_error(line, "duplicate key '" + key + "'");
    }

    [[nodiscard]] const Value& at(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw config_error("missing config key '" + key + "'");
        return it->second;
    }

    [[nodiscard]] std::string get_string(const std::string& key, std::string fallback) const {
        if (!contains(key)) return fallback;
        const auto& v = at(key);
        if (!v.is_string()) throw config_error("config key '" + key + "' must be a string");
        return std::get<std::string>(v.data);
    }

    [[nodiscard]] std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
        if (!contains(key)) return fallback;
        const auto& v = at(key);
        if (!v.is_integer()) throw config_error("config key '" + key + "' must be an integer");
        return std::get<std::int64_t>(v.data);
    }

    [[nodiscard]] double get_double(const std::string& key, double fallback) const {
        if (!contains(key)) return fallback;
        const auto& v = at(key);
        if (v.is_integer()) return static_cast<double>(std::get<std::int64_t>(v.data));
        if (!v.is_float()) throw config_error("config key '" + key + "' must be a number");
        return std::get<double>(v.data);
    }

    [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const {
        if (!contains(key)) return fallback;
        const auto& v = at(key);
        if (!v.is_bool()) throw config_error("config key '" + key + "' must be a boolean");
        return std::get<bool>(v.data);
    }

    [[nodiscard]] std::vector<std::int64_t> get_int_array(const std::string& key,
                                                          std::vector<std::int64_t> fallback) const {
        if (!contains(key)) return fallback;
        const auto& v = at(key);
        if (!v.is_array()) throw config_error("config key '" + key + "' must be an array");
        std::vector<std::int64_t> out;
        for (const auto& e : std::get<Array>(v.data)) {
            if (!e.is_integer()) throw config_error("config key '" + key + "' must hold integers");
            out.push_back(std::get<std::int64_t>(e.data));
        }
        return out;
    }

private:
    std::map<std::string, Value> values_;
};

namespace detail {

class Cursor {
public:
    Cursor(std::string_view s, std::size_t line) : s_(s), line_(line) {}

    void skip_ws() {
        while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
    }
    [[nodiscard]] bool at_end() const { return pos_ >= s_.size(); }
    [[nodiscard]] char peek() const { return at_end() ? '\0' : s_[pos_]; }
    char take() {
        if (at_end()) fail("unexpected end of line");
        return s_[pos_++];
    }
    [[noreturn]] void fail(const std::string& what) const { throw parse_error(line_, what); }

    Value value() {
        skip_ws();
        char c = peek();
        if (c == '"') return Value{string()};
        if (c == '[') return Value{array()};
        std::size_t start = pos_;
        while (!at_end() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != '#' && s_[pos_] != ' ' &&
               s_[pos_] != '\t') {
            ++pos_;
        }
        std::string tok(s_.substr(start, pos_ - start));
        if (tok.empty()) fail("missing value");
        if (tok == "true") return Value{true};
        if (tok == "false") return Value{false};
        std::string digits;
        for (char ch : tok) {
            if (ch != '_') digits.push_back(ch);
        }
        bool is_float = digits.find_first_of(".eE") != std::string::npos || digits == "inf" || digits == "nan";
        const char* b = digits.data();
        const char* e = digits.data() + digits.size();
        if (*b == '+') ++b;
        if (!is_float) {
            std::int64_t v = 0;
            auto [p, ec] = std::from_chars(b, e, v);
            if (ec == std::errc() && p == e) return Value{v};
        } else {
            double v = 0.0;
            auto [p, ec] = std::from_chars(b, e, v);
            if (ec == std::errc() && p == e) return Value{v};
        }
        fail("invalid value '" + tok + "'");
    }

    std::string string() {
        take();  // opening quote
        std::string out;
        while (true) {
            char c = take();
            if (c == '"') return out;
            if (c != '\\') {
                out.push_back(c);
                continue;
            }
            char e = take();
            switch (e) {
                case 'n': out.push_back('\n'); break;
                case 't': out.push_back('\t'); break;
                case 'r': out.push_back('\r'); break;
                case '"': out.push_back('"'); break;
                case '\\': out.push_back('\\'); break;
                default: fail(std::string("unsupported escape '\\") + e + "'");
            }
        }
    }

    Array array() {
        take();  // [
        Array out;
        skip_ws();
        if (peek() == ']') {
            take();
            return out;
        }
        while (true) {
            out.push_back(value());
            skip_ws();
            char c = take();
            if (c == ']') return out;
            if (c != ',') fail("expected ',' or ']' in array");
            skip_ws();
            if (peek() == ']') {
                take();
                return out;
            }
        }
    }

    void expect_line_end() {
        skip_ws();
        if (!at_end() && peek() != '#') fail("unexpected trailing characters");
    }

private:
    std::string_view s_;
    std::size_t line_;
    std::size_t pos_ = 0;
};

inline bool valid_key(std::string_view k) {
    if (k.empty()) return false;
    for (char c : k) {
        bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
        if (!ok) return false;
    }
    return true;
}

}  // namespace detail

inline Document parse(std::string_view doc) {
    Document out;
    std::string table;
    auto rows = text::split(doc, '\n');
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t line = i + 1;
        std::string_view row = text::trim(rows[i]);
        if (row.empty() || row.front() == '#') continue;
        if (row.front() == '[') {
            auto close = row.find(']');
            if (close == std::string_view::npos) throw parse_error(line, "unterminated table header");
            std::string_view name = text::trim(row.substr(1, close - 1));
            if (!detail::valid_key(name)) throw parse_error(line, "invalid table name '" + std::string(name) + "'");
            std::string_view rest = text::trim(row.substr(close + 1));
            if (!rest.empty() && rest.front() != '#') throw parse_error(line, "unexpected text after table header");
            table = std::string(name);
            continue;
        }
        auto eq = row.find('=');
        if (eq == std::string_view::npos) throw parse_error(line, "expected 'key = value'");
        std::string_view key = text::trim(row.substr(0, eq));
        if (!detail::valid_key(key)) throw parse_error(line, "invalid key '" + std::string(key) + "'");
        detail::Cursor cur(row.substr(eq + 1), line);
        Value v = cur.value();
        cur.expect_line_end();
        out.set(table.empty() ? std::string(key) : table + "." + std::string(key), std::move(v), line);
    }
    return out;
}

inline std::string quote(std::string_view s) {
    std::string out = "\"";
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            default: out.push_back(c);
        }
    }
    out.push_back('"');
    return out;
}

/// Shortest round-tripping decimal for a double, always with a '.' or exponent.
inline std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, p);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

}  // namespace taxalign::toml
