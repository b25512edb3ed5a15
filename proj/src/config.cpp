#include "levi/config.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "levi/checkpoint.hpp"

namespace levi {

namespace {

struct Entry {
    std::string value;
    int line = 0;
    bool used = false;
};

std::string trim(const std::string& s) {
    const std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) {
        return "";
    }
    const std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (pos <= value.size()) {
        const std::size_t comma = value.find(',', pos);
        const std::string part =
            trim(value.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
        if (!part.empty()) {
            parts.push_back(part);
        }
        if (comma == std::string::npos) {
            break;
        }
        pos = comma + 1;
    }
    return parts;
}

class Doc {
  public:
    Doc(const std::string& text, std::string name) : name_(std::move(name)) {
        std::istringstream in(text);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const std::string stripped = trim(line);
            if (stripped.empty() || stripped[0] == '#') {
                continue;
            }
            const std::size_t eq = stripped.find('=');
            if (eq == std::string::npos) {
                fail_line(line_no, "expected 'key = value'");
            }
            const std::string key = trim(stripped.substr(0, eq));
            const std::string value = trim(stripped.substr(eq + 1));
            if (key.empty()) {
                fail_line(line_no, "empty key");
            }
            if (entries_.count(key)) {
                fail_line(line_no, "duplicate key '" + key + "' (first set on line " +
                                       std::to_string(entries_[key].line) + ")");
            }
            entries_[key] = Entry{value, line_no, false};
        }
    }

    [[noreturn]] void fail_line(int line, const std::string& msg) const {
        throw ConfigError(name_ + ":" + std::to_string(line) + ": " + msg);
    }

    [[noreturn]] void fail_key(const std::string& key, const std::string& msg) const {
        auto it = entries_.find(key);
        const int line = it == entries_.end() ? 0 : it->second.line;
        throw ConfigError(name_ + ":" + std::to_string(line) + ": key '" + key + "': " + msg);
    }

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    const std::string* get(const std::string& key) {
        auto it = entries_.find(key);
        if (it == entries_.end()) {
            return nullptr;
        }
        it->second.used = true;
        return &it->second.value;
    }

    std::string get_string(const std::string& key, const std::string& fallback) {
        const std::string* v = get(key);
        return v ? *v : fallback;
    }

    Extent get_int(const std::string& key, Extent fallback, Extent min_value) {
        const std::string* v = get(key);
        if (!v) {
            return fallback;
        }
        Extent out = 0;
        const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
        if (ec != std::errc() || ptr != v->data() + v->size()) {
            fail_key(key, "'" + *v + "' is not an integer");
        }
        if (out < min_value) {
            fail_key(key, "value " + *v + " below minimum " + std::to_string(min_value));
        }
        return out;
    }

    double get_float(const std::string& key, double fallback) {
        const std::string* v = get(key);
        if (!v) {
            return fallback;
        }
        try {
            std::size_t used = 0;
            const double out = std::stod(*v, &used);
            if (used != v->size()) {
                throw std::invalid_argument("");
            }
            return out;
        } catch (const std::exception&) {
            fail_key(key, "'" + *v + "' is not a number");
        }
    }

    bool get_bool(const std::string& key, bool fallback) {
        const std::string* v = get(key);
        if (!v) {
            return fallback;
        }
        if (*v == "true") {
            return true;
        }
        if (*v == "false") {
            return false;
        }
        fail_key(key, "'" + *v + "' is not true/false");
    }

    std::vector<std::string> unused_keys() const {
        std::vector<std::string> out;
        for (const auto& [key, entry] : entries_) {
            if (!entry.used) {
                out.push_back(key + " (line " + std::to_string(entry.line) + ")");
            }
        }
        return out;
    }

    // regime indices present in the document, in numeric order
    std::vector<int> regime_indices() const {
        std::vector<int> out;
        for (const auto& [key, entry] : entries_) {
            if (key.rfind("regime.", 0) != 0) {
                continue;
            }
            const std::size_t dot = key.find('.', 7);
            if (dot == std::string::npos) {
                continue;
            }
            try {
                const int idx = std::stoi(key.substr(7, dot - 7));
                if (std::find(out.begin(), out.end(), idx) == out.end()) {
                    out.push_back(idx);
                }
            } catch (const std::exception&) {
                fail_key(key, "regime index is not an integer");
            }
        }
        std::sort(out.begin(), out.end());
        return out;
    }

  private:
    std::string name_;
    std::map<std::string, Entry> entries_;
};

OptimizerKind optimizer_from(Doc& doc, const std::string& key, OptimizerKind fallback) {
    const std::string v = doc.get_string(key, "");
    if (v.empty()) {
        return fallback;
    }
    if (v == "adam") {
        return OptimizerKind::adam;
    }
    if (v == "sgd") {
        return OptimizerKind::sgd;
    }
    doc.fail_key(key, "'" + v + "' is not adam/sgd");
}

std::vector<Extent> int_list(Doc& doc, const std::string& key) {
    const std::string* v = doc.get(key);
    std::vector<Extent> out;
    if (!v) {
        return out;
    }
    for (const std::string& part : split_list(*v)) {
        try {
            out.push_back(std::stoll(part));
        } catch (const std::exception&) {
            doc.fail_key(key, "'" + part + "' is not an integer");
        }
    }
    return out;
}

} // namespace

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& source_name) {
    Doc doc(text, source_name);
    ExperimentConfig cfg;

    std::string stem = std::filesystem::path(source_name).stem().string();
    if (stem.empty()) {
        stem = "experiment";
    }
    cfg.experiment_id = doc.get_string("experiment.id", stem);

    // data
    const std::string kind = doc.get_string("data.kind", "spurious");
    if (kind != "spurious") {
        doc.fail_key("data.kind", "'" + kind + "' is not a known generator (expected 'spurious')");
    }
    cfg.data.d_spurious_pretrain = doc.get_int("data.spurious_pretrain", 1, 0);
    cfg.data.d_spurious_finetune = doc.get_int("data.spurious_finetune", 1, 0);
    cfg.data.d_transfer = doc.get_int("data.transfer", 1, 1);
    cfg.data.strength_spurious_pretrain = doc.get_float("data.strength_spurious_pretrain", 0.8);
    cfg.data.strength_spurious_finetune = doc.get_float("data.strength_spurious_finetune", 0.8);
    cfg.data.strength_transfer = doc.get_float("data.strength_transfer", 0.6);
    cfg.data.noise_std = doc.get_float("data.noise_std", 0.5);
    const std::string label = doc.get_string("data.label", "binary");
    if (label == "binary") {
        cfg.data.label = LabelKind::binary;
    } else if (label == "regression") {
        cfg.data.label = LabelKind::regression;
    } else {
        doc.fail_key("data.label", "'" + label + "' is not binary/regression");
    }
    cfg.data.samples_per_split = doc.get_int("data.samples_per_split", 2000, 1);
    cfg.export_data = doc.get_bool("data.export", false);
    try {
        cfg.data.validate();
    } catch (const std::exception& e) {
        throw ConfigError(source_name + ": " + e.what());
    }

    // model
    cfg.model.width = doc.get_int("model.width", 32, 1);
    cfg.model.blocks = doc.get_int("model.blocks", 4, 0);
    cfg.model.task_hidden1 = doc.get_int("model.task_hidden1", 32, 1);
    cfg.model.task_hidden2 = doc.get_int("model.task_hidden2", 32, 1);
    cfg.model.task_output = doc.get_int("model.task_output", 16, 1);
    cfg.model.head_hidden = doc.get_int("model.head_hidden", 64, 1);
    cfg.model.taps = int_list(doc, "model.taps");
    for (std::size_t i = 0; i < cfg.model.taps.size(); ++i) {
        if (cfg.model.taps[i] < 1 || cfg.model.taps[i] > cfg.model.blocks) {
            doc.fail_key("model.taps", "tap " + std::to_string(cfg.model.taps[i]) + " outside 1.." +
                                           std::to_string(cfg.model.blocks));
        }
        if (i > 0 && cfg.model.taps[i] <= cfg.model.taps[i - 1]) {
            doc.fail_key("model.taps", "taps must be strictly increasing");
        }
    }
    if (const std::string* hw = doc.get("model.head_weights")) {
        if (*hw != "uniform") {
            HeadWeights w;
            for (const std::string& part : split_list(*hw)) {
                try {
                    w.weights.push_back(std::stod(part));
                } catch (const std::exception&) {
                    doc.fail_key("model.head_weights", "'" + part + "' is not a number");
                }
            }
            try {
                w.validate();
            } catch (const std::exception& e) {
                doc.fail_key("model.head_weights", e.what());
            }
            cfg.model.head_weights = w.weights;
        }
    }

    // pretraining
    cfg.pretrain.opt.kind = optimizer_from(doc, "pretrain.optimizer", OptimizerKind::adam);
    cfg.pretrain.opt.lr = doc.get_float("pretrain.lr", 1e-3);
    cfg.pretrain.steps = doc.get_int("pretrain.steps", 2000, 0);
    cfg.pretrain.batch = doc.get_int("pretrain.batch", 0, 0);
    if (cfg.pretrain.opt.lr <= 0) {
        doc.fail_key("pretrain.lr", "learning rate must be > 0");
    }

    // regimes
    const std::vector<int> indices = doc.regime_indices();
    if (indices.empty()) {
        throw ConfigError(source_name + ": no regimes configured (expected regime.0.kind = ...)");
    }
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] != static_cast<int>(i)) {
            throw ConfigError(source_name + ": regime indices must be contiguous from 0 (missing regime." +
                              std::to_string(i) + ".*)");
        }
    }
    for (int idx : indices) {
        const std::string base = "regime." + std::to_string(idx) + ".";
        RegimeSpec r;
        const std::string* kind_str = doc.get(base + "kind");
        if (!kind_str) {
            doc.fail_key(base + "kind", "missing (every regime needs a kind)");
        }
        try {
            r.kind = regime_from_name(*kind_str);
        } catch (const std::exception&) {
            doc.fail_key(base + "kind", "'" + *kind_str + "' is not a known regime");
        }
        r.name = doc.get_string(base + "name", regime_name(r.kind));
        r.opt.kind = optimizer_from(doc, base + "optimizer", OptimizerKind::adam);
        r.opt.lr = doc.get_float(base + "lr", 1e-3);
        r.steps = doc.get_int(base + "steps", 2000, 0);
        r.batch = doc.get_int(base + "batch", 0, 0);
        if (r.opt.lr <= 0) {
            doc.fail_key(base + "lr", "learning rate must be > 0");
        }

        r.phase2_opt = r.opt;
        r.phase2_opt.lr = doc.get_float(base + "phase2_lr", r.opt.lr);
        r.phase2_steps = doc.get_int(base + "phase2_steps", 0, 0);
        if (r.phase2_opt.lr <= 0) {
            doc.fail_key(base + "phase2_lr", "learning rate must be > 0");
        }
        if (r.kind == Regime::lp_then_ft && !doc.has(base + "phase2_steps")) {
            doc.fail_key(base + "kind", "lp_then_ft needs " + base + "phase2_steps");
        }

        if (const std::string* alpha = doc.get(base + "alpha")) {
            if (*alpha == "select") {
                r.alpha = -1.0;
            } else {
                try {
                    r.alpha = std::stod(*alpha);
                } catch (const std::exception&) {
                    doc.fail_key(base + "alpha", "'" + *alpha + "' is not a number or 'select'");
                }
                if (r.alpha < 0.0 || r.alpha > 1.0) {
                    doc.fail_key(base + "alpha", "alpha must lie in [0, 1]");
                }
            }
        }

        if (const std::string* members = doc.get(base + "members")) {
            for (const std::string& part : split_list(*members)) {
                Regime member;
                try {
                    member = regime_from_name(part);
                } catch (const std::exception&) {
                    doc.fail_key(base + "members", "'" + part + "' is not a known regime");
                }
                switch (member) {
                case Regime::ft:
                case Regime::fs:
                case Regime::lp:
                case Regime::ht:
                case Regime::task:
                    break;
                default:
                    doc.fail_key(base + "members", "'" + part + "' cannot be an output-ensemble member");
                }
                r.members.push_back(member);
            }
        }
        if (r.kind == Regime::ens_output && r.members.empty()) {
            doc.fail_key(base + "kind", "ens_output needs " + base + "members");
        }

        r.lora_rank = doc.get_int(base + "lora_rank", 2, 1);
        if (const std::string* targets = doc.get(base + "lora_targets")) {
            if (*targets != "all") {
                r.lora_targets = split_list(*targets);
            }
        }
        r.use_task_model = doc.get_bool(base + "use_task_model", true);
        const std::string mode = doc.get_string(base + "backbone_mode", "frozen");
        if (mode == "frozen") {
            r.backbone_mode = RegimeSpec::BackboneMode::frozen;
        } else if (mode == "ht") {
            r.backbone_mode = RegimeSpec::BackboneMode::ht;
        } else if (mode == "ft") {
            r.backbone_mode = RegimeSpec::BackboneMode::ft;
        } else {
            doc.fail_key(base + "backbone_mode", "'" + mode + "' is not frozen/ht/ft");
        }
        r.taps_override = int_list(doc, base + "taps");
        for (Extent tap : r.taps_override) {
            if (tap < 1 || tap > cfg.model.blocks) {
                doc.fail_key(base + "taps", "tap " + std::to_string(tap) + " outside 1.." +
                                                std::to_string(cfg.model.blocks));
            }
        }
        r.task_heads = doc.get_int(base + "task_heads", 1, 1);
        if (r.kind == Regime::levi && cfg.model.blocks < 1) {
            doc.fail_key(base + "kind", "levi needs a backbone with at least one block");
        }
        cfg.regimes.push_back(std::move(r));
    }

    // duplicate regime names would collide in reports
    for (std::size_t i = 0; i < cfg.regimes.size(); ++i) {
        for (std::size_t j = i + 1; j < cfg.regimes.size(); ++j) {
            if (cfg.regimes[i].name == cfg.regimes[j].name) {
                throw ConfigError(source_name + ": regimes " + std::to_string(i) + " and " + std::to_string(j) +
                                  " share the name '" + cfg.regimes[i].name + "'");
            }
        }
    }

    // seeds
    const std::vector<Extent> seeds = int_list(doc, "seeds");
    if (seeds.empty()) {
        throw ConfigError(source_name + ": no seeds configured (expected seeds = 1,2,...)");
    }
    for (Extent s : seeds) {
        cfg.seeds.push_back(static_cast<std::uint64_t>(s));
    }

    // metrics
    if (const std::string* metrics = doc.get("metrics")) {
        for (const std::string& part : split_list(*metrics)) {
            Metric m;
            try {
                m = metric_from_name(part);
            } catch (const std::exception&) {
                doc.fail_key("metrics", "'" + part + "' is not a known metric");
            }
            const bool classification = cfg.data.label == LabelKind::binary;
            if (classification && m != Metric::accuracy) {
                doc.fail_key("metrics", "'" + part + "' is not defined for binary labels");
            }
            if (!classification && m == Metric::accuracy) {
                doc.fail_key("metrics", "accuracy is not defined for regression labels");
            }
            cfg.metrics.push_back(m);
        }
    }

    cfg.output_dir = doc.get_string("output.dir", "runs/" + cfg.experiment_id);

    const std::vector<std::string> unused = doc.unused_keys();
    if (!unused.empty()) {
        std::string msg = source_name + ": unknown key";
        msg += unused.size() > 1 ? "s: " : ": ";
        for (std::size_t i = 0; i < unused.size(); ++i) {
            msg += (i ? ", " : "") + unused[i];
        }
        throw ConfigError(msg);
    }

    // resolved echo, deterministic order
    auto echo = [&cfg](const std::string& k, const std::string& v) { cfg.echo.emplace_back(k, v); };
    echo("experiment.id", cfg.experiment_id);
    echo("data.kind", "spurious");
    echo("data.spurious_pretrain", std::to_string(cfg.data.d_spurious_pretrain));
    echo("data.spurious_finetune", std::to_string(cfg.data.d_spurious_finetune));
    echo("data.transfer", std::to_string(cfg.data.d_transfer));
    echo("data.strength_spurious_pretrain", format_g17(cfg.data.strength_spurious_pretrain));
    echo("data.strength_spurious_finetune", format_g17(cfg.data.strength_spurious_finetune));
    echo("data.strength_transfer", format_g17(cfg.data.strength_transfer));
    echo("data.noise_std", format_g17(cfg.data.noise_std));
    echo("data.label", cfg.data.label == LabelKind::binary ? "binary" : "regression");
    echo("data.samples_per_split", std::to_string(cfg.data.samples_per_split));
    echo("data.export", cfg.export_data ? "true" : "false");
    echo("model.width", std::to_string(cfg.model.width));
    echo("model.blocks", std::to_string(cfg.model.blocks));
    echo("model.task_hidden1", std::to_string(cfg.model.task_hidden1));
    echo("model.task_hidden2", std::to_string(cfg.model.task_hidden2));
    echo("model.task_output", std::to_string(cfg.model.task_output));
    echo("model.head_hidden", std::to_string(cfg.model.head_hidden));
    {
        std::string taps;
        const std::vector<Extent>& t = cfg.model.taps;
        if (t.empty()) {
            taps = "all";
        } else {
            for (std::size_t i = 0; i < t.size(); ++i) {
                taps += (i ? "," : "") + std::to_string(t[i]);
            }
        }
        echo("model.taps", taps);
    }
    {
        std::string hw = "uniform";
        if (!cfg.model.head_weights.empty()) {
            hw.clear();
            for (std::size_t i = 0; i < cfg.model.head_weights.size(); ++i) {
                hw += (i ? "," : "") + format_g17(cfg.model.head_weights[i]);
            }
        }
        echo("model.head_weights", hw);
    }
    echo("pretrain.optimizer", cfg.pretrain.opt.kind == OptimizerKind::adam ? "adam" : "sgd");
    echo("pretrain.lr", format_g17(cfg.pretrain.opt.lr));
    echo("pretrain.steps", std::to_string(cfg.pretrain.steps));
    echo("pretrain.batch", std::to_string(cfg.pretrain.batch));
    for (std::size_t i = 0; i < cfg.regimes.size(); ++i) {
        const RegimeSpec& r = cfg.regimes[i];
        const std::string base = "regime." + std::to_string(i) + ".";
        echo(base + "kind", regime_name(r.kind));
        echo(base + "name", r.name);
        echo(base + "optimizer", r.opt.kind == OptimizerKind::adam ? "adam" : "sgd");
        echo(base + "lr", format_g17(r.opt.lr));
        echo(base + "steps", std::to_string(r.steps));
        echo(base + "batch", std::to_string(r.batch));
        if (r.kind == Regime::lp_then_ft) {
            echo(base + "phase2_lr", format_g17(r.phase2_opt.lr));
            echo(base + "phase2_steps", std::to_string(r.phase2_steps));
        }
        if (r.kind == Regime::ens_weight) {
            echo(base + "alpha", r.alpha < 0 ? "select" : format_g17(r.alpha));
        }
        if (r.kind == Regime::ens_output) {
            std::string members;
            for (std::size_t k = 0; k < r.members.size(); ++k) {
                members += (k ? "," : "") + std::string(regime_name(r.members[k]));
            }
            echo(base + "members", members);
        }
        if (r.kind == Regime::lora) {
            echo(base + "lora_rank", std::to_string(r.lora_rank));
        }
        if (r.kind == Regime::levi) {
            echo(base + "use_task_model", r.use_task_model ? "true" : "false");
            echo(base + "backbone_mode", r.backbone_mode == RegimeSpec::BackboneMode::frozen ? "frozen"
                                         : r.backbone_mode == RegimeSpec::BackboneMode::ht   ? "ht"
                                                                                             : "ft");
        }
        if (r.kind == Regime::task) {
            echo(base + "task_heads", std::to_string(r.task_heads));
        }
    }
    {
        std::string s;
        for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
            s += (i ? "," : "") + std::to_string(cfg.seeds[i]);
        }
        echo("seeds", s);
    }
    {
        std::string m;
        if (cfg.metrics.empty()) {
            m = cfg.data.label == LabelKind::binary ? "accuracy" : "rmse,l1";
        } else {
            for (std::size_t i = 0; i < cfg.metrics.size(); ++i) {
                m += (i ? "," : "") + std::string(metric_name(cfg.metrics[i]));
            }
        }
        echo("metrics", m);
    }
    echo("output.dir", cfg.output_dir);

    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file '" + path + "'");
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_experiment_config(buf.str(), path);
}

} // namespace levi
