#include "kernels.hpp"

namespace caselab::kernels {

MacCounter& mac_counter() {
  thread_local MacCounter counter;
  return counter;
}

void mac_reset() {
  mac_counter() = MacCounter{};
}

}  // namespace caselab::kernels
