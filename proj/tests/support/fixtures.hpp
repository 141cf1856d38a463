#pragma once

#include "qclt/mdp.hpp"

namespace qclt::testing {

// One state, one action, reward 1, discount 1/2.
inline TabularMDP single_mdp() {
  TabularMDP m;
  m.num_states = 1;
  m.num_actions = 1;
  m.transition = MatrixXd::Ones(1, 1);
  m.reward = VectorXd::Ones(1);
  m.discount = 0.5;
  return m;
}

// Two states, one action, sticky kernel, reward (1, 0), discount 1/2.
inline TabularMDP twostate_mdp() {
  TabularMDP m;
  m.num_states = 2;
  m.num_actions = 1;
  m.transition.resize(2, 2);
  m.transition << 0.9, 0.1, 0.1, 0.9;
  m.reward.resize(2);
  m.reward << 1.0, 0.0;
  m.discount = 0.5;
  return m;
}

}  // namespace qclt::testing
