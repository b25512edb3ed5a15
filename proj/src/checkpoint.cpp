#include "levi/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace levi {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

} // namespace

std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void atomic_write_file(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            fail("cannot write '" + tmp + "'");
        }
        out << contents;
    }
    std::filesystem::rename(tmp, path);
}

void save_checkpoint(const ParamStore& store, const std::string& path) {
    std::ostringstream out;
    out << "levi-checkpoint 1\n";
    for (const Param& p : store) {
        out << "param " << p.name << " frozen=" << (p.frozen ? 1 : 0) << " shape=";
        for (std::size_t d = 0; d < p.value.shape.size(); ++d) {
            out << (d ? "x" : "") << p.value.shape[d];
        }
        out << "\n";
        for (std::size_t i = 0; i < p.value.data.size(); ++i) {
            out << (i ? " " : "") << format_g17(p.value.data[i]);
        }
        out << "\n";
    }
    atomic_write_file(path, out.str());
}

ParamStore load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        fail("cannot open checkpoint '" + path + "'");
    }
    std::string header;
    std::getline(in, header);
    if (header != "levi-checkpoint 1") {
        fail("'" + path + "' is not a version-1 checkpoint (header '" + header + "')");
    }
    ParamStore store;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream head(line);
        std::string tag, name, frozen_field, shape_field;
        head >> tag >> name >> frozen_field >> shape_field;
        if (tag != "param" || frozen_field.rfind("frozen=", 0) != 0 || shape_field.rfind("shape=", 0) != 0) {
            fail("malformed checkpoint record '" + line + "'");
        }
        const bool frozen = frozen_field == "frozen=1";
        Shape shape;
        {
            std::string dims = shape_field.substr(6);
            std::size_t pos = 0;
            while (pos < dims.size()) {
                const std::size_t x = dims.find('x', pos);
                const std::string part = dims.substr(pos, x == std::string::npos ? std::string::npos : x - pos);
                shape.push_back(std::stoll(part));
                pos = x == std::string::npos ? dims.size() : x + 1;
            }
        }
        Tensor t = Tensor::zeros(shape);
        std::string values;
        if (!std::getline(in, values)) {
            fail("checkpoint truncated after '" + name + "'");
        }
        std::istringstream vs(values);
        for (Extent i = 0; i < t.numel(); ++i) {
            if (!(vs >> t.at(i))) {
                fail("checkpoint value row for '" + name + "' too short");
            }
        }
        store.add(name, std::move(t), frozen);
    }
    return store;
}

} // namespace levi
