#include "eralab/toml.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "eralab/errors.hpp"

namespace eralab {

using nlohmann::json;

namespace {

class Parser {
public:
    explicit Parser(std::string_view text) : text_(text) {}

    json run() {
        json root = json::object();
        json* table = &root;
        while (true) {
            skip_blank_lines();
            if (eof()) {
                break;
            }
            if (peek() == '[') {
                table = header(root);
            } else {
                key_value(*table);
            }
            end_of_line();
        }
        return root;
    }

private:
    [[noreturn]] void error(const std::string& what) const {
        throw ConfigError("TOML line " + std::to_string(line_) + ": " + what);
    }

    bool eof() const { return pos_ >= text_.size(); }
    char peek() const { return eof() ? '\0' : text_[pos_]; }

    char get() {
        const char c = text_[pos_++];
        if (c == '\n') {
            ++line_;
        }
        return c;
    }

    void expect(char c) {
        if (peek() != c) {
            error(std::string("expected '") + c + "'");
        }
        get();
    }

    void skip_spaces() {
        while (!eof() && (peek() == ' ' || peek() == '\t')) {
            get();
        }
    }

    void skip_comment() {
        if (peek() == '#') {
            while (!eof() && peek() != '\n') {
                get();
            }
        }
    }

    void skip_blank_lines() {
        while (true) {
            skip_spaces();
            skip_comment();
            if (peek() == '\r') {
                get();
            }
            if (peek() == '\n') {
                get();
                continue;
            }
            return;
        }
    }

    // Whitespace, comments and newlines inside arrays and inline tables.
    void skip_any() { skip_blank_lines(); }

    void end_of_line() {
        skip_spaces();
        skip_comment();
        if (peek() == '\r') {
            get();
        }
        if (!eof() && peek() != '\n') {
            error("unexpected text after value");
        }
    }

    static bool bare_char(char c) {
        return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_' || c == '-';
    }

    std::string key_part() {
        skip_spaces();
        if (peek() == '"') {
            return basic_string();
        }
        if (peek() == '\'') {
            return literal_string();
        }
        std::string k;
        while (!eof() && bare_char(peek())) {
            k += get();
        }
        if (k.empty()) {
            error("expected a key");
        }
        return k;
    }

    std::vector<std::string> dotted_key() {
        std::vector<std::string> parts{key_part()};
        skip_spaces();
        while (peek() == '.') {
            get();
            parts.push_back(key_part());
            skip_spaces();
        }
        return parts;
    }

    json* descend(json* node, const std::vector<std::string>& parts, std::size_t count) {
        for (std::size_t i = 0; i < count; ++i) {
            json& next = (*node)[parts[i]];
            if (next.is_null()) {
                next = json::object();
            }
            if (next.is_array() && !next.empty() && next.back().is_object()) {
                node = &next.back();
                continue;
            }
            if (!next.is_object()) {
                error("key '" + parts[i] + "' is not a table");
            }
            node = &next;
        }
        return node;
    }

    json* header(json& root) {
        get();
        const bool array_table = peek() == '[';
        if (array_table) {
            get();
        }
        const auto parts = dotted_key();
        expect(']');
        if (array_table) {
            expect(']');
        }
        json* parent = descend(&root, parts, parts.size() - 1);
        json& slot = (*parent)[parts.back()];
        if (array_table) {
            if (slot.is_null()) {
                slot = json::array();
            }
            if (!slot.is_array()) {
                error("'" + parts.back() + "' is not an array of tables");
            }
            slot.push_back(json::object());
            return &slot.back();
        }
        if (slot.is_null()) {
            slot = json::object();
        } else if (!slot.is_object()) {
            error("'" + parts.back() + "' is already defined as a value");
        }
        return &slot;
    }

    void key_value(json& table) {
        const auto parts = dotted_key();
        expect('=');
        skip_spaces();
        json value = parse_value();
        json* target = descend(&table, parts, parts.size() - 1);
        if (target->contains(parts.back())) {
            error("duplicate key '" + parts.back() + "'");
        }
        (*target)[parts.back()] = std::move(value);
    }

    json parse_value() {
        const char c = peek();
        if (c == '"') {
            return basic_string();
        }
        if (c == '\'') {
            return literal_string();
        }
        if (c == '[') {
            return array();
        }
        if (c == '{') {
            return inline_table();
        }
        if (text_.substr(pos_, 4) == "true") {
            pos_ += 4;
            return true;
        }
        if (text_.substr(pos_, 5) == "false") {
            pos_ += 5;
            return false;
        }
        return number();
    }

    std::string basic_string() {
        expect('"');
        std::string out;
        while (true) {
            if (eof() || peek() == '\n') {
                error("unterminated string");
            }
            const char c = get();
            if (c == '"') {
                return out;
            }
            if (c != '\\') {
                out += c;
                continue;
            }
            if (eof()) {
                error("unterminated escape");
            }
            const char e = get();
            switch (e) {
            case 'n': out += '\n'; break;
            case 't': out += '\t'; break;
            case 'r': out += '\r'; break;
            case '"': out += '"'; break;
            case '\\': out += '\\'; break;
            default: error(std::string("unsupported escape \\") + e);
            }
        }
    }

    std::string literal_string() {
        expect('\'');
        std::string out;
        while (true) {
            if (eof() || peek() == '\n') {
                error("unterminated string");
            }
            const char c = get();
            if (c == '\'') {
                return out;
            }
            out += c;
        }
    }

    json array() {
        expect('[');
        json out = json::array();
        while (true) {
            skip_any();
            if (peek() == ']') {
                get();
                return out;
            }
            out.push_back(parse_value());
            skip_any();
            if (peek() == ',') {
                get();
                continue;
            }
            skip_any();
            expect(']');
            return out;
        }
    }

    json inline_table() {
        expect('{');
        json out = json::object();
        skip_spaces();
        if (peek() == '}') {
            get();
            return out;
        }
        while (true) {
            key_value(out);
            skip_spaces();
            if (peek() == ',') {
                get();
                continue;
            }
            expect('}');
            return out;
        }
    }

    json number() {
        std::string token;
        while (!eof()) {
            const char c = peek();
            if (std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '+' || c == '-' || c == '.' || c == '_') {
                token += get();
            } else {
                break;
            }
        }
        if (token.empty()) {
            error("expected a value");
        }
        std::string clean;
        for (char c : token) {
            if (c != '_') {
                clean += c;
            }
        }
        std::string body = clean;
        double sign = 1.0;
        if (!body.empty() && (body[0] == '+' || body[0] == '-')) {
            sign = body[0] == '-' ? -1.0 : 1.0;
            body = body.substr(1);
        }
        if (body == "inf") {
            return sign * std::numeric_limits<double>::infinity();
        }
        if (body == "nan") {
            return std::numeric_limits<double>::quiet_NaN();
        }
        const bool is_float = clean.find_first_of(".eE") != std::string::npos;
        const char* first = clean.data() + (clean[0] == '+' ? 1 : 0);
        const char* last = clean.data() + clean.size();
        if (is_float) {
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(first, last, v);
            if (ec != std::errc() || ptr != last) {
                error("invalid number '" + token + "'");
            }
            return v;
        }
        long long v = 0;
        const auto [ptr, ec] = std::from_chars(first, last, v);
        if (ec != std::errc() || ptr != last) {
            error("invalid value '" + token + "'");
        }
        return v;
    }

    std::string_view text_;
    std::size_t pos_ = 0;
    int line_ = 1;
};

} // namespace

json parse_toml(std::string_view text) {
    return Parser(text).run();
}

json parse_toml_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read config file '" + path.string() + "'");
    }
    std::ostringstream text;
    text << in.rdbuf();
    return parse_toml(text.str());
}

} // namespace eralab
