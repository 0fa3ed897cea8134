#include "fedmob/toml.hpp"

#include <cctype>
#include <charconv>
#include <string>

#include "fedmob/errors.hpp"

namespace fedmob {

namespace {

struct Parser {
    std::string_view text;
    size_t pos = 0;
    int line = 1;

    [[noreturn]] void fail(const std::string& msg) const {
        throw ConfigError("config line " + std::to_string(line) + ": " + msg);
    }

    bool eof() const { return pos >= text.size(); }
    char peek() const { return text[pos]; }

    char advance() {
        char c = text[pos++];
        if (c == '\n') ++line;
        return c;
    }

    // Skips spaces and tabs; newlines only when `newlines` is set.
    void skip_ws(bool newlines) {
        while (!eof()) {
            char c = peek();
            if (c == ' ' || c == '\t' || c == '\r') {
                advance();
            } else if (c == '#') {
                while (!eof() && peek() != '\n') advance();
            } else if (newlines && c == '\n') {
                advance();
            } else {
                break;
            }
        }
    }

    std::string parse_key() {
        std::string key;
        while (!eof()) {
            char c = peek();
            if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') {
                key.push_back(advance());
            } else {
                break;
            }
        }
        if (key.empty()) fail("expected a key");
        return key;
    }

    std::string parse_string() {
        advance(); // opening quote
        std::string out;
        while (true) {
            if (eof()) fail("unterminated string");
            char c = advance();
            if (c == '"') break;
            if (c == '\n') fail("newline inside string");
            if (c == '\\') {
                if (eof()) fail("unterminated escape");
                char e = advance();
                switch (e) {
                case '"': out.push_back('"'); break;
                case '\\': out.push_back('\\'); break;
                case 'n': out.push_back('\n'); break;
                case 't': out.push_back('\t'); break;
                default: fail(std::string("unknown escape \\") + e);
                }
            } else {
                out.push_back(c);
            }
        }
        return out;
    }

    nlohmann::json parse_number() {
        size_t start = pos;
        while (!eof()) {
            char c = peek();
            if (std::isdigit(static_cast<unsigned char>(c)) || c == '+' || c == '-' || c == '.' ||
                c == 'e' || c == 'E' || c == '_') {
                advance();
            } else {
                break;
            }
        }
        std::string raw(text.substr(start, pos - start));
        std::string clean;
        for (char c : raw)
            if (c != '_') clean.push_back(c);
        bool is_float = clean.find_first_of(".eE") != std::string::npos;
        if (is_float) {
            double v = 0.0;
            auto [p, ec] = std::from_chars(clean.data(), clean.data() + clean.size(), v);
            if (ec != std::errc() || p != clean.data() + clean.size())
                fail("bad number \"" + raw + "\"");
            return v;
        }
        int64_t v = 0;
        auto [p, ec] = std::from_chars(clean.data(), clean.data() + clean.size(), v);
        if (ec != std::errc() || p != clean.data() + clean.size())
            fail("bad integer \"" + raw + "\"");
        return v;
    }

    nlohmann::json parse_value() {
        skip_ws(false);
        if (eof()) fail("expected a value");
        char c = peek();
        if (c == '"') return parse_string();
        if (c == '[') return parse_array();
        if (c == '{') return parse_inline_table();
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '+' || c == '-' || c == '.')
            return parse_number();
        // bare word: true / false
        std::string word = parse_key();
        if (word == "true") return true;
        if (word == "false") return false;
        fail("unknown value \"" + word + "\"");
    }

    nlohmann::json parse_array() {
        advance(); // [
        nlohmann::json arr = nlohmann::json::array();
        skip_ws(true);
        if (!eof() && peek() == ']') {
            advance();
            return arr;
        }
        while (true) {
            arr.push_back(parse_value());
            skip_ws(true);
            if (eof()) fail("unterminated array");
            char c = advance();
            if (c == ']') break;
            if (c != ',') fail("expected ',' or ']' in array");
            skip_ws(true);
            if (!eof() && peek() == ']') { // trailing comma
                advance();
                break;
            }
        }
        return arr;
    }

    nlohmann::json parse_inline_table() {
        advance(); // {
        nlohmann::json obj = nlohmann::json::object();
        skip_ws(false);
        if (!eof() && peek() == '}') {
            advance();
            return obj;
        }
        while (true) {
            skip_ws(false);
            std::string key = parse_key();
            skip_ws(false);
            if (eof() || advance() != '=') fail("expected '=' in inline table");
            obj[key] = parse_value();
            skip_ws(false);
            if (eof()) fail("unterminated inline table");
            char c = advance();
            if (c == '}') break;
            if (c != ',') fail("expected ',' or '}' in inline table");
        }
        return obj;
    }
};

} // namespace

nlohmann::json parse_toml(std::string_view text) {
    Parser p{text};
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* current = &root;

    while (true) {
        p.skip_ws(true);
        if (p.eof()) break;
        char c = p.peek();
        if (c == '[') {
            p.advance();
            nlohmann::json* node = &root;
            while (true) {
                p.skip_ws(false);
                std::string part = p.parse_key();
                if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
                node = &(*node)[part];
                if (!node->is_object()) p.fail("section [" + part + "] collides with a value");
                p.skip_ws(false);
                if (p.eof()) p.fail("unterminated section header");
                char d = p.advance();
                if (d == ']') break;
                if (d != '.') p.fail("expected '.' or ']' in section header");
            }
            current = node;
        } else {
            std::string key = p.parse_key();
            p.skip_ws(false);
            if (p.eof() || p.advance() != '=') p.fail("expected '=' after key \"" + key + "\"");
            if (current->contains(key)) p.fail("duplicate key \"" + key + "\"");
            (*current)[key] = p.parse_value();
            p.skip_ws(false);
            if (!p.eof() && p.peek() != '\n') p.fail("trailing characters after value for \"" + key + "\"");
        }
    }
    return root;
}

} // namespace fedmob
