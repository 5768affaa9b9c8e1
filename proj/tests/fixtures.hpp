#pragma once

#include <string>
#include <vector>

#include "cdpo/prefgraph.hpp"

namespace cdpo::test_support {

// Two user cliques with disjoint liked pools and disjoint disliked pools:
// clique 0 likes pool A and dislikes pool C, clique 1 likes pool B and
// dislikes pool D. Edge polarity is a function of the attribute alone.
inline PreferenceGraph two_clique_graph(int users_per_clique = 8, int pool_size = 6) {
  PreferenceGraph g;
  const char* pools[] = {"A", "B", "C", "D"};
  const char* words[] = {"crimson", "teal", "amber", "violet", "olive", "ivory", "slate", "coral"};
  for (const char* pool : pools) {
    for (int i = 0; i < pool_size; ++i) {
      g.add_attribute(std::string(pool) + std::to_string(i), std::string(words[i % 8]) + " " + pool + " style " +
                                                                 std::to_string(i));
    }
  }
  for (int c = 0; c < 2; ++c) {
    const std::string liked = c == 0 ? "A" : "B";
    const std::string disliked = c == 0 ? "C" : "D";
    for (int u = 0; u < users_per_clique; ++u) {
      std::vector<std::string> likes, dislikes;
      for (int i = 0; i < pool_size; ++i) {
        likes.push_back(liked + std::to_string(i));
        dislikes.push_back(disliked + std::to_string(i));
      }
      g.add_user("c" + std::to_string(c) + "u" + std::to_string(u), FeatureMode::learned, likes, dislikes);
    }
  }
  return g;
}

}  // namespace cdpo::test_support
