from todqos.sustain.core import (QoSNotification, SubscriptionRegistry, SubscriptionState,
                                 Subscription, SustainService, evaluate)

__all__ = ["QoSNotification", "Subscription", "SubscriptionRegistry", "SubscriptionState",
           "SustainService", "evaluate"]
