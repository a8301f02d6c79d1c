"""
URL configuration for sweep_site project.

Only the admin is exposed; it browses the run ledger.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]
