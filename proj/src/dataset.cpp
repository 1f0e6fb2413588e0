#include "gfsl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gfsl/errors.hpp"
#include "gfsl/rng.hpp"

namespace gfsl {

using nlohmann::json;

std::string role_name(Role r) {
    switch (r) {
        case Role::Seen: return "seen";
        case Role::UnseenVal: return "unseen_val";
        case Role::UnseenTest: return "unseen_test";
    }
    return "?";
}

std::string split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        case Split::Aux: return "aux";
    }
    return "?";
}

namespace {

Role parse_role(const std::string& s) {
    if (s == "seen") return Role::Seen;
    if (s == "unseen_val") return Role::UnseenVal;
    if (s == "unseen_test") return Role::UnseenTest;
    throw ValidationError("unknown class role '" + s + "'");
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    if (s == "aux") return Split::Aux;
    throw ValidationError("unknown split tag '" + s + "'");
}

}  // namespace

std::vector<int> Dataset::classes_with_role(Role r) const {
    std::vector<int> out;
    for (int c = 0; c < class_count(); ++c) {
        if (class_roles[c] == r) out.push_back(c);
    }
    return out;
}

const std::vector<std::size_t>& Dataset::instances_of(int class_id, Split s) const {
    return index_[static_cast<std::size_t>(class_id) * 4 + static_cast<std::size_t>(s)];
}

void Dataset::finalize() {
    if (feature_dim == 0) throw ValidationError("feature_dim must be positive");
    if (class_names.size() != class_roles.size()) {
        throw ValidationError("class role map does not cover every class");
    }
    index_.assign(class_names.size() * 4, {});
    aux_pool_.clear();
    std::set<std::string> ids;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const Instance& in = instances[i];
        if (in.class_id < 0 || in.class_id >= class_count()) {
            throw ValidationError("instance '" + in.id + "' references unknown class");
        }
        if (in.features.size() != feature_dim) {
            throw ValidationError("instance '" + in.id + "' has " +
                                  std::to_string(in.features.size()) + " features, expected " +
                                  std::to_string(feature_dim));
        }
        for (double x : in.features) {
            if (!std::isfinite(x)) {
                throw ValidationError("instance '" + in.id + "' has a non-finite feature");
            }
        }
        if (!ids.insert(in.id).second) {
            throw ValidationError("duplicate instance id '" + in.id + "'");
        }
        const Role role = class_roles[in.class_id];
        const bool split_ok = (role == Role::Seen && (in.split == Split::Train || in.split == Split::Aux)) ||
                              (role == Role::UnseenVal && in.split == Split::Val) ||
                              (role == Role::UnseenTest && in.split == Split::Test);
        if (!split_ok) {
            throw ValidationError("instance '" + in.id + "' of " + role_name(role) +
                                  " class '" + class_names[in.class_id] + "' carries split '" +
                                  split_name(in.split) + "'");
        }
        index_[static_cast<std::size_t>(in.class_id) * 4 + static_cast<std::size_t>(in.split)]
            .push_back(i);
        if (in.split == Split::Aux) aux_pool_.push_back(i);
    }
    for (int c = 0; c < class_count(); ++c) {
        if (class_roles[c] == Role::Seen && instances_of(c, Split::Train).empty()) {
            throw ValidationError("seen class '" + class_names[c] + "' has no meta-train instance");
        }
    }
}

Matrix Dataset::gather(const std::vector<std::size_t>& idx) const {
    Matrix out(idx.size(), feature_dim);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const auto& f = instances[idx[r]].features;
        std::copy(f.begin(), f.end(), out.row(r).begin());
    }
    return out;
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open dataset file '" + path + "'");

    Dataset ds;
    std::string line;
    std::size_t line_no = 0;

    auto parse_line = [&](const std::string& text) -> json {
        try {
            return json::parse(text);
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    };

    if (!std::getline(in, line)) throw ParseError(path + ": empty file, header expected");
    ++line_no;
    const json header = parse_line(line);
    if (!header.contains("feature_dim") || !header.contains("roles")) {
        throw ParseError(path + ":1: header must carry feature_dim and roles");
    }
    ds.feature_dim = header.at("feature_dim").get<std::size_t>();

    std::map<std::string, int> class_ids;
    for (const auto& [name, role] : header.at("roles").items()) {
        const int id = static_cast<int>(ds.class_names.size());
        class_ids.emplace(name, id);
        ds.class_names.push_back(name);
        ds.class_roles.push_back(parse_role(role.get<std::string>()));
    }

    std::map<std::string, int> domain_ids;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const json rec = parse_line(line);
        Instance inst;
        try {
            inst.id = rec.at("id").get<std::string>();
            const std::string cls = rec.at("class").get<std::string>();
            const auto it = class_ids.find(cls);
            if (it == class_ids.end()) {
                throw ValidationError("class '" + cls + "' missing from header roles");
            }
            inst.class_id = it->second;
            if (rec.contains("domain") && !rec.at("domain").is_null()) {
                const std::string dom = rec.at("domain").get<std::string>();
                auto [dit, fresh] = domain_ids.emplace(dom, static_cast<int>(ds.domain_names.size()));
                if (fresh) ds.domain_names.push_back(dom);
                inst.domain_id = dit->second;
            }
            inst.split = parse_split(rec.at("split").get<std::string>());
            inst.features = rec.at("features").get<std::vector<double>>();
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        ds.instances.push_back(std::move(inst));
    }
    ds.finalize();
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open '" + path + "' for writing");
    json roles = json::object();
    for (int c = 0; c < ds.class_count(); ++c) {
        roles[ds.class_names[c]] = role_name(ds.class_roles[c]);
    }
    out << json{{"feature_dim", ds.feature_dim}, {"roles", roles}}.dump() << "\n";
    for (const Instance& in : ds.instances) {
        json rec{{"id", in.id},
                 {"class", ds.class_names[in.class_id]},
                 {"split", split_name(in.split)},
                 {"features", in.features}};
        rec["domain"] = in.domain_id < 0 ? json() : json(ds.domain_names[in.domain_id]);
        out << rec.dump() << "\n";
    }
}

void SyntheticSpec::validate() const {
    if (num_domains < 1 || classes_per_domain < 1 || instances_per_class < 1) {
        throw ValidationError("synthetic spec counts must be >= 1");
    }
    if (feature_dim == 0) throw ValidationError("synthetic spec feature_dim must be >= 1");
    if (sigma_domain <= 0.0 || sigma_class <= 0.0 || sigma_noise < 0.0) {
        throw ValidationError("synthetic spec spreads must be positive (noise may be 0)");
    }
    const int total = num_domains * classes_per_domain;
    if (unseen_val_classes < 0 || unseen_test_classes < 0 ||
        unseen_val_classes + unseen_test_classes >= total) {
        throw ValidationError("synthetic spec leaves no seen classes");
    }
    if (aux_fraction < 0.0 || aux_fraction >= 1.0) {
        throw ValidationError("aux_fraction must lie in [0, 1)");
    }
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng root(spec.seed);
    Rng domain_rng = root.stream(1);
    Rng class_rng = root.stream(2);
    Rng noise_rng = root.stream(3);

    const int total_classes = spec.num_domains * spec.classes_per_domain;
    Dataset ds;
    ds.feature_dim = spec.feature_dim;

    std::vector<std::vector<double>> domain_means(spec.num_domains,
                                                  std::vector<double>(spec.feature_dim));
    for (auto& mu : domain_means) {
        for (double& x : mu) x = spec.sigma_domain * domain_rng.next_gaussian();
    }

    // Interleave classes over domains, then assign roles by position so seen,
    // unseen-val and unseen-test all span the domains.
    const int seen_classes = total_classes - spec.unseen_val_classes - spec.unseen_test_classes;
    char name[32];
    ds.class_names.resize(total_classes);
    ds.class_roles.resize(total_classes);
    std::vector<int> class_domain(total_classes);
    std::vector<std::vector<double>> class_means(total_classes);
    int order = 0;
    for (int rank = 0; rank < spec.classes_per_domain; ++rank) {
        for (int dom = 0; dom < spec.num_domains; ++dom, ++order) {
            std::snprintf(name, sizeof(name), "c%04d", order);
            ds.class_names[order] = name;
            ds.class_roles[order] = order < seen_classes ? Role::Seen
                                    : order < seen_classes + spec.unseen_val_classes
                                        ? Role::UnseenVal
                                        : Role::UnseenTest;
            class_domain[order] = dom;
            auto mu = domain_means[dom];
            for (double& x : mu) x += spec.sigma_class * class_rng.next_gaussian();
            class_means[order] = std::move(mu);
        }
    }
    ds.domain_names.resize(spec.num_domains);
    for (int dom = 0; dom < spec.num_domains; ++dom) {
        std::snprintf(name, sizeof(name), "d%02d", dom);
        ds.domain_names[dom] = name;
    }

    const int aux_per_class = static_cast<int>(spec.aux_fraction * spec.instances_per_class);
    for (int c = 0; c < total_classes; ++c) {
        for (int k = 0; k < spec.instances_per_class; ++k) {
            Instance inst;
            std::snprintf(name, sizeof(name), "%s_i%04d", ds.class_names[c].c_str(), k);
            inst.id = name;
            inst.class_id = c;
            inst.domain_id = class_domain[c];
            switch (ds.class_roles[c]) {
                case Role::Seen:
                    inst.split = k >= spec.instances_per_class - aux_per_class ? Split::Aux
                                                                               : Split::Train;
                    break;
                case Role::UnseenVal: inst.split = Split::Val; break;
                case Role::UnseenTest: inst.split = Split::Test; break;
            }
            inst.features = class_means[c];
            for (double& x : inst.features) x += spec.sigma_noise * noise_rng.next_gaussian();
            ds.instances.push_back(std::move(inst));
        }
    }
    ds.finalize();
    return ds;
}

namespace {

// Classes of `role` with at least shot+queries instances in their split,
// optionally restricted to one domain (by the domain of their first instance).
std::vector<int> eligible_classes(const Dataset& ds, Role role, int shot, int queries,
                                  int domain_id) {
    std::vector<int> out;
    for (int c : ds.classes_with_role(role)) {
        const Split split = role == Role::Seen ? Split::Train
                            : role == Role::UnseenVal ? Split::Val
                                                      : Split::Test;
        const auto& pool = ds.instances_of(c, split);
        if (pool.size() < static_cast<std::size_t>(shot + queries)) continue;
        if (domain_id >= 0 && ds.instances[pool.front()].domain_id != domain_id) continue;
        out.push_back(c);
    }
    return out;
}

Episode sample_episode_impl(const Dataset& ds, Role role, int shot, int way, Rng& rng,
                            int queries_per_class, int domain_id) {
    if (shot < 1 || way < 1 || queries_per_class < 1) {
        throw CapacityError("episode needs shot, way and queries_per_class >= 1");
    }
    const Split split = role == Role::Seen ? Split::Train
                        : role == Role::UnseenVal ? Split::Val
                                                  : Split::Test;
    const std::vector<int> pool = eligible_classes(ds, role, shot, queries_per_class, domain_id);
    if (pool.size() < static_cast<std::size_t>(way)) {
        throw CapacityError("only " + std::to_string(pool.size()) + " " + role_name(role) +
                            " classes hold " + std::to_string(shot + queries_per_class) +
                            " instances; " + std::to_string(way) + " needed");
    }
    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.queries_per_class = queries_per_class;
    for (std::size_t i : rng.sample_without_replacement(pool.size(), way)) {
        ep.class_ids.push_back(pool[i]);
    }
    for (int c : ep.class_ids) {
        const auto& members = ds.instances_of(c, split);
        const auto picks =
            rng.sample_without_replacement(members.size(), shot + queries_per_class);
        for (int k = 0; k < shot; ++k) ep.support.push_back(members[picks[k]]);
        for (int k = 0; k < queries_per_class; ++k) {
            ep.query.push_back(members[picks[shot + k]]);
        }
    }
    // Regroup query rows by class to keep support/query layouts aligned.
    std::vector<std::size_t> grouped;
    grouped.reserve(ep.query.size());
    for (int c = 0; c < way; ++c) {
        for (int q = 0; q < queries_per_class; ++q) {
            grouped.push_back(ep.query[static_cast<std::size_t>(c) * queries_per_class + q]);
        }
    }
    ep.query = std::move(grouped);
    return ep;
}

}  // namespace

Episode sample_episode(const Dataset& ds, Role role, int shot, int way, std::uint64_t seed,
                       int queries_per_class) {
    Rng rng(seed);
    return sample_episode_impl(ds, role, shot, way, rng, queries_per_class, -1);
}

GfslTask sample_gfsl_task(const Dataset& ds, Role role, int shot, int way, std::uint64_t seed,
                          int queries_per_class, bool single_domain) {
    if (role == Role::Seen) throw CapacityError("GFSL tasks sample support from an unseen role");
    Rng rng(seed);
    GfslTask task;
    if (single_domain) {
        std::vector<int> domains;
        for (int d = 0; d < static_cast<int>(ds.domain_names.size()); ++d) {
            const auto classes = eligible_classes(ds, role, shot, queries_per_class, d);
            if (classes.size() >= static_cast<std::size_t>(way)) domains.push_back(d);
        }
        if (domains.empty()) {
            throw CapacityError("no domain holds " + std::to_string(way) + " eligible " +
                                role_name(role) + " classes");
        }
        task.domain_id = domains[rng.next_index(domains.size())];
    }
    task.unseen = sample_episode_impl(ds, role, shot, way, rng, queries_per_class, task.domain_id);

    const auto& aux = ds.aux_pool();
    const std::size_t want = static_cast<std::size_t>(queries_per_class) * way;
    if (aux.size() < want) {
        throw CapacityError("aux seen-test pool holds " + std::to_string(aux.size()) +
                            " instances; " + std::to_string(want) + " needed");
    }
    for (std::size_t i : rng.sample_without_replacement(aux.size(), want)) {
        task.seen_query.push_back(aux[i]);
    }
    return task;
}

}  // namespace gfsl
