#include "bmmae/common.hpp"

namespace bmmae {

ModalitySet parse_subset(const std::string& spec) {
    ModalitySet raw;
    size_t pos = 0;
    while (pos <= spec.size()) {
        size_t comma = spec.find(',', pos);
        if (comma == std::string::npos) comma = spec.size();
        std::string tok = spec.substr(pos, comma - pos);
        // trim surrounding whitespace
        size_t b = tok.find_first_not_of(" \t");
        size_t e = tok.find_last_not_of(" \t");
        tok = b == std::string::npos ? std::string() : tok.substr(b, e - b + 1);
        if (!tok.empty()) {
            auto m = modality_from_name(tok);
            if (!m) throw UnknownModalityError("unknown modality name: " + tok);
            raw.push_back(*m);
        }
        pos = comma + 1;
    }
    if (raw.empty()) throw ConfigError("empty modality subset: " + spec);
    return canonical_subset(std::move(raw));
}

std::string subset_to_string(const ModalitySet& s) {
    std::string out;
    for (Modality m : s) {
        if (!out.empty()) out += ',';
        out += modality_name(m);
    }
    return out;
}

}  // namespace bmmae
