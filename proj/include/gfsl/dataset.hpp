#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gfsl/matrix.hpp"

namespace gfsl {

enum class Role { Seen, UnseenVal, UnseenTest };
enum class Split { Train, Val, Test, Aux };

std::string role_name(Role r);
std::string split_name(Split s);

struct Instance {
    std::string id;
    int class_id = -1;
    int domain_id = -1;  // -1 when the record carries no domain
    Split split = Split::Train;
    std::vector<double> features;
};

/// Labeled feature vectors plus the class-role map. Immutable after
/// finalize(); samplers only read it.
struct Dataset {
    std::size_t feature_dim = 0;
    std::vector<Instance> instances;
    std::vector<std::string> class_names;
    std::vector<Role> class_roles;  // indexed by class id
    std::vector<std::string> domain_names;

    int class_count() const { return static_cast<int>(class_names.size()); }
    std::vector<int> classes_with_role(Role r) const;
    const std::vector<std::size_t>& instances_of(int class_id, Split s) const;
    const std::vector<std::size_t>& aux_pool() const { return aux_pool_; }

    /// Builds the per-class indexes and checks every structural invariant;
    /// throws ValidationError naming the violated rule.
    void finalize();

    /// n x feature_dim matrix for the given instance indices.
    Matrix gather(const std::vector<std::size_t>& idx) const;

  private:
    std::vector<std::vector<std::size_t>> index_;  // class_id * 4 + split
    std::vector<std::size_t> aux_pool_;
};

/// One few-shot classification task: way*shot support rows and
/// queries_per_class*way query rows, both grouped by draw order of class_ids.
struct Episode {
    std::vector<std::size_t> support;
    std::vector<std::size_t> query;
    int way = 0;
    int shot = 0;
    int queries_per_class = 0;
    std::vector<int> class_ids;
};

/// One evaluation task over the joint label space: a few-shot unseen episode
/// plus queries drawn from the held-out seen pool.
struct GfslTask {
    Episode unseen;
    std::vector<std::size_t> seen_query;
    int domain_id = -1;  // set when support was restricted to one domain
};

struct SyntheticSpec {
    int num_domains = 5;
    int classes_per_domain = 8;
    int instances_per_class = 60;
    std::size_t feature_dim = 32;
    double sigma_domain = 4.0;
    double sigma_class = 1.5;
    double sigma_noise = 0.6;
    int unseen_val_classes = 5;
    int unseen_test_classes = 10;
    double aux_fraction = 0.25;
    std::uint64_t seed = 0;

    void validate() const;  // throws ValidationError
};

Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& ds, const std::string& path);

/// Layered Gaussian generator: domain means around the origin, class means
/// around their domain, instances around their class. Roles are assigned
/// round-robin over domains so every role spans all domains.
Dataset gen_synthetic(const SyntheticSpec& spec);

/// K-shot N-way episode from the classes of `role`, plus queries_per_class
/// held-out queries per class. Pure function of (ds, args, seed).
Episode sample_episode(const Dataset& ds, Role role, int shot, int way, std::uint64_t seed,
                       int queries_per_class = 15);

/// Episode from the unseen role plus queries_per_class*way seen queries drawn
/// uniformly from the aux pool. With single_domain the support classes come
/// from one (seeded) domain.
GfslTask sample_gfsl_task(const Dataset& ds, Role role, int shot, int way, std::uint64_t seed,
                          int queries_per_class = 15, bool single_domain = false);

}  // namespace gfsl
